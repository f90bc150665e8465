"""The two semantic-level discriminators and why they agree.

The FC discriminator scores one class-average feature vector at a time; the
1x1-conv variant applies the same two-layer stack at every pixel. With the
conv weights transplanted from the FC network, a label map that gives each
class exactly one pixel makes both losses identical.
"""

import numpy as np

from segadapt.autodiff import Tensor
from segadapt.losses import class_average, semantic_adversarial_conv, semantic_adversarial_fc
from segadapt.networks import ModelConfig, SemanticDiscriminatorConv, SemanticDiscriminatorFC

cfg = ModelConfig(feature_channels=16, semantic_hidden=32)
rng = np.random.default_rng(7)

# class-average pooling on a 4-pixel map: V^k is the mean feature where y == k
features = Tensor(rng.standard_normal((cfg.feature_channels, 2, 2)))
labels = np.array([[0, 1], [2, 3]])
vset = class_average(features, labels, 4)
print("present classes:", vset.present_classes.tolist())
print("V^0 equals the (0,0) feature column:", np.allclose(vset.vectors.data[0], features.data[:, 0, 0]))

fc = SemanticDiscriminatorFC(4, cfg, seed=1, dtype=np.float64)
conv = SemanticDiscriminatorConv.from_fc(fc, config=cfg)

loss_fc = semantic_adversarial_fc(fc, vset)
loss_conv = semantic_adversarial_conv(conv, features, labels)
print(f"FC adversarial loss   {loss_fc.item():.12f}")
print(f"conv adversarial loss {loss_conv.item():.12f}")
print(f"difference            {abs(loss_fc.item() - loss_conv.item()):.2e}")

# on a larger map the conv variant scores every pixel instead of the mean,
# so the two losses are related but no longer equal
features = Tensor(rng.standard_normal((cfg.feature_channels, 6, 6)))
labels = rng.integers(0, 4, size=(6, 6))
loss_fc = semantic_adversarial_fc(fc, class_average(features, labels, 4))
loss_conv = semantic_adversarial_conv(conv, features, labels)
print(f"\n6x6 map: FC {loss_fc.item():.4f} vs per-pixel conv {loss_conv.item():.4f}")
