import os
import sys

# --threads must take effect before numpy initializes its BLAS thread pool
if "--threads" in sys.argv:
    idx = sys.argv.index("--threads")
    if idx + 1 < len(sys.argv):
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, sys.argv[idx + 1])

from .cli import main  # noqa: E402

sys.exit(main())
