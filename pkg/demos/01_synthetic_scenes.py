# A look at the synthetic multi-view data: scenes, captions, views.
import numpy as np

from rfnet.corpus import generate_dataset

ds = generate_dataset(300, seed=0, min_count=1)
print("vocabulary:", len(ds.vocab), "words;", "n_frequent =", ds.n_frequent)
print("splits:", {k: len(v) for k, v in ds.splits.items()})
print("view shapes (k, d):", [(v.A.shape[0], v.A.shape[1]) for v in ds.splits["train"][0].enc.views])

ex = ds.splits["train"][0]
print("\nscene objects:")
for o in ex.scene.objects:
    print("  ", o)
print("captions:")
for c in ex.captions:
    print("  ", " ".join(ds.vocab.decode(c)))

# each view hides one attribute of every object (shape, color or size)
a0 = np.stack([ex.enc.views[m].a0 for m in range(len(ds.view_dims))])
print("\nglobal vector norms per view:", np.round(np.linalg.norm(a0, axis=1), 3))
