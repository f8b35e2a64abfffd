"""Hallucination-aware caption metrics and grounded verification.

Concealment is judged on captions: the target must vanish (C), the rest
of the scene must survive (GP), the caption must not drift into generic
text (SD), and newly mentioned objects must be checked against visual
evidence. The last step queries a phrase-grounding detector; here a
local stub service answers from a fixture table over the same HTTP
schema a real detector service would use.

Run: python3 demos/05_metrics_and_grounding.py
"""

from bcr import (
    HttpGroundingClient,
    LexiconExtractor,
    StubGroundingService,
    candidate_hallucinations,
    concealment_success,
    extract_objects,
    global_preservation,
    grounded_hallucination_rate,
    semantic_drift,
    verify_object,
)
from bcr.grounding import verify_candidates
from bcr.metrics import HashedBagOfWordsEmbedder

clean_caption = "a dog sleeping on a park bench next to a salt shaker"
adv_caption = "a park bench next to a salt shaker and a fire hydrant"
target = "dog"

extractor = LexiconExtractor(["dog", "park bench", "salt shaker", "fire hydrant"])
o_clean = extract_objects(clean_caption, extractor)
o_adv = extract_objects(adv_caption, extractor)
print("clean objects:      ", sorted(o_clean.phrases))
print("adversarial objects:", sorted(o_adv.phrases))
print("head nouns:         ", sorted(o_adv.head_nouns))

print(f"\nconcealment success for '{target}': "
      f"{concealment_success(target, o_clean, o_adv)}")
print(f"global preservation: {global_preservation(o_clean, o_adv):.3f}")

embedder = HashedBagOfWordsEmbedder()
print(f"semantic drift: {semantic_drift(clean_caption, adv_caption, embedder):.3f}")
print(f"(identical captions drift exactly "
      f"{semantic_drift(clean_caption, clean_caption, embedder)})")

candidates = candidate_hallucinations(o_clean, o_adv)
print(f"\nnewly mentioned objects: {sorted(candidates)}")

# Verdict table: 'hydrant' is only weakly localized; queries use the
# head noun of each phrase.
table = {"hydrant": [{"box": [1, 1, 3, 3], "confidence": 0.22}]}
with StubGroundingService(table) as service:
    client = HttpGroundingClient(service.endpoint)
    verdicts = verify_candidates(client, "adv.png", candidates, threshold=0.3)
    for phrase, verdict in verdicts.items():
        print(f"  {phrase!r} -> detected={verdict.detected} "
              f"(max confidence {verdict.max_confidence})")
    rate = grounded_hallucination_rate(verdicts.values(), len(o_adv.phrases))
    print(f"grounded hallucination rate: {rate:.3f} "
          f"(ungrounded new objects / all adversarial objects)")

    # Confidence exactly at the threshold does not count as detected.
    exact = {"ghost": [{"box": [0, 0, 1, 1], "confidence": 0.3}]}
with StubGroundingService(exact) as service:
    client = HttpGroundingClient(service.endpoint)
    verdict = verify_object(client, "adv.png", "ghost", threshold=0.3)
    print(f"\nboundary case: confidence 0.3 at threshold 0.3 -> "
          f"detected={verdict.detected}")
