"""
Capsule decoder: 2D poses with per-joint uncertainty
====================================================

The decoder turns image features and crop intrinsics into a 3D pose capsule
and a camera capsule. It reprojects the pose and predicts a sigma per joint.
Joints whose training labels carry extra noise end up with larger sigma.
"""
import numpy as np

from epochpose.data import (SyntheticConfig, SyntheticFeatureProvider, generate,
                            observation_noise, rest_pose)
from epochpose.flow import FlowConfig, normalize_pose2d, train_flow
from epochpose.regnet import Decoder, RegConfig, decoder_input, predict, train_regnet

ds = generate(SyntheticConfig(count=1800, seed=0))
tr, te = ds.split(1500)
flow, _ = train_flow(normalize_pose2d(tr.x_gt).data, FlowConfig(n_blocks=4, hidden=64, epochs=20))

prov = SyntheticFeatureProvider(width=128, seed=0)
F, Ft = prov(tr), prov(te)
K, _ = tr.cameras()
Kt, _ = te.cameras()

noisy = [3, 6, 13, 16]          # feet and wrists
sig = np.zeros(17)
sig[noisy] = 4.0
res = train_regnet(F, K, observation_noise(tr, sig, seed=1), flow,
                   RegConfig(epochs=20, batch_size=64, lr=3e-4))

d0 = Decoder(F.shape[1] + 6, rest=rest_pose())
d0.fit_normalization(decoder_input(F, K))
x0, _, _ = predict(d0, Ft, Kt)
x1, s1, _ = predict(res.decoder, Ft, Kt)
err = lambda x: np.linalg.norm(x - te.x_gt, axis=-1).mean()
print(f"2D error untrained {err(x0):.4f}, trained {err(x1):.4f}")
print("pelvis stays at the origin:", np.abs(x1[:, 0]).max())
ms = s1.mean(axis=(0, 2))
print("mean sigma, noisy joints:", np.round(ms[noisy], 4))
print("mean sigma, other joints:", np.round(np.delete(ms, noisy), 4))
