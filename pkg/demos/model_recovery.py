"""
Compressing a model and recovering it on the device
===================================================

The server keeps the largest weights at full precision and sends only the
sign of the rest, together with their mean and largest magnitude. The device
fills the gaps from the model it trained last time it took part.
"""

import numpy as np

from caesar_sim import codec
from caesar_sim.core import mse

# %%
# A 3x3 layer. The five smallest magnitudes are 0.2, 0.3, 0.5, 0.7 and 0.8.
w = np.array([0.9, -0.3, 1.5, -1.2, 0.2, -0.7, 1.1, 0.5, 0.8], dtype=np.float32)
cm = codec.encode_model(w, 5 / 9)
print("1-bit positions:", np.flatnonzero(cm.quantized_mask))
print("avg |w| =", cm.avg_abs, " max |w| =", cm.max_abs)
print("payload:", codec.model_payload_bits(cm), "bits instead of", codec.model_payload_bits_for(w.size, 0.0))

# %%
# The device's old copy. Position 1 now has the wrong sign and position 8 is
# larger than anything that was masked, so both fall back to sign * avg.
local = np.array([0.0, 0.25, 0.0, 0.0, 0.18, -0.65, 0.0, 0.45, 0.95], dtype=np.float32)
recovered = codec.recover_model(cm, local)
for i in np.flatnonzero(cm.quantized_mask):
    print(f"  w[{i}] = {w[i]:+.2f}  local {local[i]:+.2f}  ->  {recovered[i]:+.2f}")

# %%
# Error grows with the compression ratio and with how far the local copy has
# drifted from the current model.
rng = np.random.default_rng(0)
w = rng.standard_normal(2000).astype(np.float32)
print("\nratio  drift=0.02  drift=0.1  drift=0.5")
for theta in (0.2, 0.4, 0.6, 0.8):
    row = [mse(codec.recover_model(codec.encode_model(w, theta), w + s * rng.standard_normal(w.size).astype(np.float32)), w)
           for s in (0.02, 0.1, 0.5)]
    print(f" {theta:.1f}   " + "   ".join(f"{e:.2e}" for e in row))
