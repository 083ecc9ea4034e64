"""Generate shared RLE test vectors for the Python and TypeScript suites.

Runs are computed with a plain scalar loop, independent of the package
codec, so both implementations are checked against the same reference.
"""

import json
from pathlib import Path

import numpy as np


def runs_by_loop(flat):
    runs = []
    start = None
    for i, v in enumerate(flat):
        if v and start is None:
            start = i
        elif not v and start is not None:
            runs.append([start, i - start])
            start = None
    if start is not None:
        runs.append([start, len(flat) - start])
    return runs


def vector(name, mask):
    mask = np.asarray(mask, dtype=bool)
    return {
        "name": name,
        "h": mask.shape[0],
        "w": mask.shape[1],
        "runs": runs_by_loop(mask.ravel().tolist()),
        "pixels": mask.ravel().astype(int).tolist(),
    }


def main():
    rng = np.random.default_rng(2024)
    vectors = [
        vector("empty", np.zeros((4, 6))),
        vector("full", np.ones((3, 3))),
        vector("single_pixel", np.eye(1, 25, 13).reshape(5, 5)),
        vector("row_spanning_run", np.array([[0, 1, 1], [1, 1, 0], [0, 0, 1]])),
        vector("checkerboard", np.indices((6, 6)).sum(axis=0) % 2 == 0),
    ]
    for i in range(5):
        vectors.append(vector(f"random_{i}", rng.uniform(size=(8, 8)) > 0.6))
    out = Path(__file__).resolve().parent.parent / "shared" / "rle_vectors.json"
    out.parent.mkdir(exist_ok=True)
    out.write_text(json.dumps(vectors, indent=1))
    print(f"wrote {len(vectors)} vectors to {out}")


if __name__ == "__main__":
    main()
