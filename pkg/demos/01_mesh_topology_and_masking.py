"""Mesh topology, upsampling and the attention mask, step by step."""

# %% [markdown]
# The decoder reasons about a coarse mesh of N vertices and K joints. Two
# fixed sparse matrices tie it to the output: U maps coarse vertices to the
# fine mesh (one midpoint per edge), R maps fine vertices to joints.

# %%
import numpy as np

from fastmetro import mesh as M
from fastmetro.model import FastMETRO, ModelConfig
from fastmetro.numeric import Tensor, no_grad

topo = M.Topology.from_mesh(M.two_triangles(), 3)
print("K, N, M =", topo.num_joints, topo.num_vertices, topo.num_fine_vertices)
print("U rows sum to one:", np.allclose(topo.upsample.row_sums(), 1.0))
print("U =\n", topo.upsample.to_dense())

# %% [markdown]
# The two triangles share edge (0, 1), so vertices 2 and 3 are the only
# non-adjacent pair. The mask forbids exactly that pair in both directions.

# %%
mask = M.build_attention_mask(topo.adjacency, topo.num_joints)
print("forbidden pairs:", np.argwhere(~mask.allowed) - topo.num_joints)

# %% [markdown]
# A small model with the mask on. Masked heads put probability exactly zero
# on the forbidden pair, not merely something tiny.

# %%
cfg = ModelConfig(stage_dims=(32, 16), num_heads=4, feature_grid=(2, 2), image_size=(8, 8),
                  backbone_channels=16, backbone_hidden=16).with_topology(topo)
model = FastMETRO(cfg, topo, seed=0)
images = Tensor(np.random.default_rng(0).random((1, 8, 8, 1)))
with no_grad():
    out = model.forward(images, record_attention=True)
k = topo.num_joints
probs = out.attention["decoder_self"][0][0]  # (heads, K+N, K+N)
print("p(2 -> 3) per head:", probs[:, k + 2, k + 3])
print("p(2 -> 1) per head:", probs[:, k + 2, k + 1].round(4))

# %% [markdown]
# The fine mesh is always U times the coarse prediction, and the regressed
# joints are R times the fine mesh.

# %%
fine = topo.upsample.to_scipy() @ out.coarse_vertices3d.data[0]
print("fine == U @ coarse:", np.abs(fine - out.fine_vertices3d.data[0]).max())
