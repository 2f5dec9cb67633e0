"""Write the 5000-image MNIST subset bundled with mlxtend as IDX files.

    pip install mlxtend && python data/make_digits5k.py

The output (``digits5k-*-idx*-ubyte.gz``) is committed, so this only needs
rerunning to regenerate it.
"""
import os

import numpy as np
from mlxtend.data import mnist_data

from robuxfer.datasets import write_idx

here = os.path.dirname(os.path.abspath(__file__))
X, y = mnist_data()
write_idx(os.path.join(here, "digits5k-images-idx3-ubyte.gz"), X.reshape(-1, 28, 28).astype(np.uint8))
write_idx(os.path.join(here, "digits5k-labels-idx1-ubyte.gz"), y.astype(np.uint8))
print(f"wrote {len(y)} images")
