"""Generate synthetic paired embedding files for exercising the CLI.

Source vectors are gaussian; targets are a random orthogonal transform of the
source plus optional gaussian noise. With --captions > 1 each group gets that
many source rows (noisy copies, like captions of one image) paired to a single
target row.

Example:

    python scripts/gen_synthetic.py --out-dir /tmp/demo --n 500 --dim 16 --noise 0.05
    xmodal fit --method procrustes --src /tmp/demo/src.emb --tgt /tmp/demo/tgt.emb \\
        --pairs /tmp/demo/pairs.jsonl --out /tmp/demo/rot.xmap
"""

import argparse
from pathlib import Path

import numpy as np

from xmodal import EmbeddingMatrix, PairEntry, PairManifest, save_emb, save_manifest


def random_orthogonal(rng, d):
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out-dir", required=True)
    parser.add_argument("--n", type=int, default=500, help="number of groups")
    parser.add_argument("--dim", type=int, default=16)
    parser.add_argument("--noise", type=float, default=0.0)
    parser.add_argument("--captions", type=int, default=1, help="source rows per group")
    parser.add_argument("--scale", type=float, default=1.0, help="source magnitude")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    rot = random_orthogonal(rng, args.dim)
    anchors = rng.standard_normal((args.n, args.dim)) * args.scale

    src_rows, src_ids, entries = [], [], []
    for g in range(args.n):
        for c in range(args.captions):
            row = anchors[g]
            if args.captions > 1:
                row = row + rng.normal(0.0, 0.05 * args.scale, args.dim)
            src_rows.append(row)
            src_ids.append(f"src{g}_{c}" if args.captions > 1 else f"src{g}")
            entries.append(PairEntry(src_ids[-1], f"tgt{g}", f"g{g}"))
    tgt_rows = anchors @ rot
    if args.noise:
        tgt_rows = tgt_rows + rng.normal(0.0, args.noise, tgt_rows.shape)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_emb(
        EmbeddingMatrix(np.asarray(src_rows, dtype=np.float32), tuple(src_ids)),
        out / "src.emb",
    )
    save_emb(
        EmbeddingMatrix(
            tgt_rows.astype(np.float32), tuple(f"tgt{g}" for g in range(args.n))
        ),
        out / "tgt.emb",
    )
    save_manifest(PairManifest(tuple(entries)), out / "pairs.jsonl")
    print(f"wrote {out}/src.emb ({len(src_ids)} rows), {out}/tgt.emb ({args.n} rows), {out}/pairs.jsonl")


if __name__ == "__main__":
    main()
