"""Active-stereo point-cloud synthesis and self-training domain adaptation."""

import os

# numba probes TBB (too old here) unless a layer is chosen before import
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

__version__ = "0.1.0"
