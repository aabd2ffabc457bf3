"""From scene descriptions to query vectors, without a network.

The live pipeline asks a chat model which sounds remain once a masked object
is taken out of a scene.  Offline, the same question gets a cruder answer:
drop the region's content words from the scene description.  The query is then
hashed into the vector the separator is conditioned on.

    python3 demos/text_queries.py
"""

import numpy as np

from qsep.querygen import content_tokens, fallback_subtract, text_to_embedding

scenes = [
    ("a man plays guitar on a beach with crashing waves", "a man playing guitar"),
    ("a dog barks near a busy road while cars pass", "a barking dog"),
    ("rain falls on a tin roof", "violin solo"),
    ("a violin solo", "a violin solo"),
]

for scene, region in scenes:
    q = fallback_subtract(scene, region)
    print(f"scene : {scene}")
    print(f"region: {region}  (content words {content_tokens(region)})")
    print(f"query : {q.text!r} [{q.origin}]\n")

# Embeddings are deterministic and close for queries that share words.
texts = ["crashing waves", "waves crashing on a beach", "busy road traffic", "crashing waves"]
vecs = np.stack([text_to_embedding(t).values for t in texts])
unit = vecs / np.linalg.norm(vecs, axis=1, keepdims=True)
print("cosine similarity between query embeddings:")
for t, row in zip(texts, unit @ unit.T):
    print(f"  {t:28}" + " ".join(f"{x:6.2f}" for x in row))
