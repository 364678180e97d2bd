"""Photoacoustic projection imaging: forward model, UBP/DAL, DALnet and TV reconstruction."""
import os

os.environ.setdefault("NUMBA_THREADING_LAYER_PRIORITY", "omp workqueue tbb")
