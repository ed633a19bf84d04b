"""
The two server-side building blocks on toy numbers
==================================================

Item clustering turns an aggregated embedding table into categories, and
the elbow split divides clients ranked by similarity to a core client.
"""
import numpy as np

from cofedrec import SimilarityScores, category_items, elbow_split, kmeans, similarity_scores

rng = np.random.default_rng(0)

# three well separated item blobs in 2-d
items = np.vstack([rng.normal(c, 0.2, size=(8, 2)) for c in ((0, 0), (4, 0), (0, 4))])
res = kmeans(items, 3, rng)
for k in range(3):
    print(f"category {k}: items {category_items(res.membership, k).tolist()}")
print(f"within-cluster sum of squares {res.objective:.3f}")

# similarity scores with a clear drop after the fourth client
scores = SimilarityScores(client_ids=np.arange(8), scores=np.array([1.0, 0.97, 0.95, 0.93, 0.4, 0.35, 0.3, 0.28]), core_id=0)
g = elbow_split(scores)
print(f"elbow at rank {g.elbow_rank}: similar {g.similar}, dissimilar {g.dissimilar}")

# scores from real uploads: rows of a category compared by cosine to the core's rows
uploads = {u: rng.normal(size=(24, 4)) for u in range(6)}
uploads[5] = uploads[0] + rng.normal(0, 0.05, size=(24, 4))  # client 5 nearly copies client 0
cat = category_items(res.membership, 0)
s = similarity_scores(uploads[0], list(uploads.items()), cat, core_id=0, category=0)
print("cosine to core:", dict(zip(s.client_ids.tolist(), np.round(s.scores, 3).tolist())))
print("similar group:", elbow_split(s).similar)
