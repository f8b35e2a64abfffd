"""The bundled miniature encoder: frozen, deterministic, differentiable.

The attack only needs three things from a vision encoder: layer-wise
token features, repeatability (frozen weights), and pixel gradients.
The toy encoder is a small pre-norm ViT with seeded random weights,
written in float64 numpy with an explicit reverse-mode pass. This
script shows feature shapes, bitwise determinism, and checks the
analytic pixel gradient against central finite differences.

Run: python3 demos/02_encoder_features_and_gradients.py
"""

import numpy as np

from bcr import EncoderDescriptor, extract_features, toy_encoder, validate_image

descriptor = EncoderDescriptor(depth=4, patch_size=2, feature_dim=32,
                               input_resolution=16, identifier="toy")
encoder = toy_encoder(seed=7, descriptor=descriptor)
print("Encoder:", encoder.metadata)

rng = np.random.default_rng(0)
image = validate_image(rng.uniform(0, 1, size=(3, 16, 16)))

features = extract_features(encoder, image, layers=[1, 4])
print(f"\nTokens x dims per layer: {features[1].shape} "
      f"({features.token_count} tokens = 8x8 patches + CLS)")
print("CLS row of layer 4, first 6 dims:", np.round(features[4][0, :6], 4))

again = extract_features(encoder, image, layers=[1, 4])
print("Bitwise repeatable:", np.array_equal(features[4], again[4]))

# Pixel gradient of a scalar probe through the full transformer stack.
probe = rng.normal(size=features[4].shape)
feats, vjp = encoder.features_with_vjp(image.data, [4])
analytic = vjp({4: probe})

h = 1e-5
checks = []
for _ in range(8):
    c = tuple(int(rng.integers(s)) for s in image.data.shape)
    plus, minus = image.data.copy(), image.data.copy()
    plus[c] += h
    minus[c] -= h
    fd = (float((probe * encoder.features(plus, [4])[4]).sum())
          - float((probe * encoder.features(minus, [4])[4]).sum())) / (2 * h)
    checks.append((c, analytic[c], fd))

print("\npixel            analytic        finite-diff")
for c, a, f in checks:
    print(f"{str(c):<16} {a:>14.8f} {f:>18.8f}")
worst = max(abs(a - f) / max(abs(f), 1e-12) for _, a, f in checks)
print(f"worst relative gap over sampled pixels: {worst:.2e}")
