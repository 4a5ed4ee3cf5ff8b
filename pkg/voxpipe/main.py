import os
import sys

# numpy / BLAS が読み込まれる前にスレッド数の上限を決める
_threads = os.environ.get("VOXPIPE_THREADS", "").strip()
if _threads:
    os.environ.setdefault("OMP_NUM_THREADS", _threads)
    os.environ.setdefault("OPENBLAS_NUM_THREADS", _threads)

from voxpipe.app import cli_dispatch  # noqa: E402


def main(argv=None):
    return cli_dispatch(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    raise SystemExit(main())
