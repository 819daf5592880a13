"""Pin BLAS to one thread before numpy loads: the GEMMs here are small
enough that threading only adds sync overhead, and a fixed thread count
keeps reduction order (and therefore every logged float) reproducible."""

import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
