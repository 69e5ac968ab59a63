"""
Attention gating and recurrent fusion
=====================================

Each latent query scores every cell of the present and memory maps. A
sigmoid of the score is compared with its own median, so roughly half of the
cells pass for every query. The gated maps go through a GRU-style update and a
deformable convolution before the per-query results are averaged.
"""

import numpy as np

from attentivegru.fusion import FusionLayer, attention_gate, concurrent_cross_attention
from attentivegru.tensor import Tensor, mac_counter

rng = np.random.default_rng(0)

# the gate keeps the top half of each query's scores
scores = Tensor(np.array([[0.1, 0.9, 0.4, 0.6], [2.0, -1.0, 0.0, 0.5]]))
print(attention_gate(scores, Tensor(np.asarray(0.0))).data)

# a fusion layer with two blocks of four queries over 16-channel maps
layer = FusionLayer(rng, dim=16, n_queries=4, n_blocks=2)
frames = [Tensor(rng.normal(size=(16, 16, 16))) for _ in range(8)]

b = layer.blocks[0]
present = Tensor(frames[0].data[None])
memory = Tensor(np.zeros_like(present.data))
sp, sm = concurrent_cross_attention(b.queries, present, memory, b)
print("present scores", sp.shape, "memory scores at t=0 are all zero:", not sm.data.any())

# cost grows linearly with sequence length and the memory never grows
for t in (2, 4, 8):
    with mac_counter() as macs:
        out = layer(frames[:t])
    print(f"T={t}: {int(macs):>10d} MACs, memory {layer.state_bytes} bytes, output {out.shape}")
