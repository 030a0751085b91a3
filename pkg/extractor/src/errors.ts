/** Error taxonomy, mirroring the toolkit's exit-code convention:
 *  0 ok, 2 usage, 3 setup (encoder/weights unavailable), 4 data. */

export class UsageError extends Error {
  readonly exitCode = 2;
}

export class SetupError extends Error {
  readonly exitCode = 3;
}

export class DataError extends Error {
  readonly exitCode = 4;
}

export class FormatError extends DataError {}

export class CorruptionError extends FormatError {}

export class ValidationError extends DataError {}
