"""
Functional time encoding
========================

Elapsed time becomes a vector of cosines and sines at geometrically spaced
frequencies. Every encoding has unit norm, and nearby times map to nearby
vectors.
"""

import numpy as np

from dynllm import diffmath as dm
from dynllm.time_encoding import TimeEncoder, encode_with, geometric_frequencies

omega = geometric_frequencies(8)
print("frequencies", np.round(omega, 5))

dt = np.array([0.0, 1.0, 60.0, 3600.0, 86400.0])
phi = encode_with(dt, omega).data
print("shape", phi.shape, "norms", np.round(np.linalg.norm(phi, axis=1), 12))

# phi(0) is cos=1, sin=0 in every pair, scaled by sqrt(1/d)
print("phi(0)", phi[0])

# similarity between encodings falls as the gap grows
for gap in (1.0, 10.0, 100.0, 1000.0):
    a, b = encode_with(np.array([500.0, 500.0 + gap]), omega).data
    print("gap %6.0f  cosine %.4f" % (gap, a @ b))

# the frequencies are trainable; their gradient comes through the encoder
store = dm.ParameterStore(np.random.default_rng(0))
enc = TimeEncoder(store, d=4)
dm.sum(dm.square(dm.sub(enc.encode(np.array([3.0, 7.0])), 0.1))).backward()
print("d loss / d omega", enc.omega.grad)
