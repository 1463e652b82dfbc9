"""Images in, batches out: loading, resizing, augmentation and the stratified split.

Run: python demos/03_data_pipeline.py
"""
import tempfile

import numpy as np

from lwmscnn import data

# a small synthetic stand-in for the four leaf classes, written as PNGs
images, labels = data.make_synthetic_dataset(n_per_class=12, size=32, seed=0)
root = data.write_image_folder(tempfile.mkdtemp(), images, labels)
index = data.scan_dataset(root)
print("classes:", index.class_names)
print("per-class counts:", index.class_counts())

img = data.load_image(root / index.entries[0].path)
print("loaded", img.shape, img.dtype, "range", float(img.min()), float(img.max()))
big = data.resize(img, 224, 224)
print("resized to", big.shape, "range stays", float(big.min()), float(big.max()))

# augmentation: each sample draws flips, brightness, contrast, saturation and hue
rng = np.random.default_rng(1)
factors = data.sample_factors(data.AugmentParams(), rng)
print("sampled factors:", {k: round(v, 3) if isinstance(v, float) else v
                           for k, v in factors.items()})
out = data.apply_factors(big, factors)
print("luma shift from saturation+hue alone:",
      float(np.abs(data.luma(data.adjust_hue(data.adjust_saturation(big, 1.2), 0.05))
                   - data.luma(big)).max()))
print("augmented range", float(out.min()), float(out.max()))

# the 80:10:10 rule on the published class sizes
for c, (tr, va, te) in zip((513, 1192, 985, 1162),
                           data.allocate_split_counts([513, 1192, 985, 1162])):
    print(f"{c:>5} images -> train {tr:>4}  val {va:>3}  test {te:>3}")

split = data.stratified_split(index, seed=42)
for s in data.SPLITS:
    print(s, split.class_counts(s))
batches = list(data.batch_iterator(split, "train", root, batch_size=16, image_size=(32, 32)))
print("train batches:", [len(y) for _, y in batches])
