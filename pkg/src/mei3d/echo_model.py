"""Reference external model: response = mean pixel, served over stdio.

    python -m mei3d.echo_model [--nan]

``--nan`` answers every request with a NaN response (protocol fault testing).
"""

import sys

import numpy as np

from .models import serve_stdio


def main(argv=None) -> None:
    argv = sys.argv[1:] if argv is None else argv
    emit_nan = "--nan" in argv

    def evaluate(img):
        if emit_nan:
            return float("nan"), np.zeros_like(img)
        return float(img.mean()), np.full(img.shape, 1.0 / img.size)

    serve_stdio(evaluate)


if __name__ == "__main__":
    main()
