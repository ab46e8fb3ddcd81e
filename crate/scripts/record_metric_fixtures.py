"""Record reference dvc_eval and CIDEr values for the metric fixtures.

Mirrors the dense-captioning evaluator's pairing (every prediction scored
against each reference whose tIoU reaches the threshold, unmatched
predictions scored against a placeholder sentence) and scores the pairs
with pycocoevalcap's Bleu and Cider. Sentences go through the same
tokenization rule as the Rust crate instead of the PTB tokenizer, which
needs Java. METEOR is not recorded: the Rust crate implements only the
exact-match stage.

Run once from the repository root:

    python3 scripts/record_metric_fixtures.py
"""

import json
import math
import os

from pycocoevalcap.bleu.bleu import Bleu
from pycocoevalcap.cider.cider import Cider

FIXTURES = os.path.join(os.path.dirname(__file__), "..", "crates", "core", "tests", "fixtures")
THRESHOLDS = [0.3, 0.5, 0.7, 0.9]
PLACEHOLDER = "abc123!@#"


def tokenize(sentence):
    tokens, current = [], ""
    for c in sentence:
        if c.isspace():
            if current:
                tokens.append(current)
                current = ""
        elif c.isalnum():
            current += c.lower()
        else:
            if current:
                tokens.append(current)
                current = ""
            tokens.append(c.lower())
    if current:
        tokens.append(current)
    return tokens


def tiou(a, b):
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = max(a[1], b[1]) - min(a[0], b[0])
    return inter / union if union > 0 else 0.0


def score_video(preds, ref, thr):
    res, gts = {}, {}
    k = 0
    for p in preds:
        added = False
        for seg, sent in zip(ref["timestamps"], ref["sentences"]):
            if tiou(p["segment"], seg) >= thr:
                res[k] = [" ".join(tokenize(p["sentence"]))]
                gts[k] = [" ".join(tokenize(sent))]
                k += 1
                added = True
        if not added:
            res[k] = [" ".join(tokenize(p["sentence"]))]
            gts[k] = [" ".join(tokenize(PLACEHOLDER))]
            k += 1
    if not res:
        return 0.0, 0.0
    bleu, _ = Bleu(4).compute_score(gts, res, verbose=0)
    cider, _ = Cider().compute_score(gts, res)
    return float(bleu[3]), float(cider)


def main():
    with open(os.path.join(FIXTURES, "annotations.json")) as f:
        refs = json.load(f)
    with open(os.path.join(FIXTURES, "predictions.json")) as f:
        preds = json.load(f)

    per_threshold = []
    for thr in THRESHOLDS:
        b = c = 0.0
        for vid in sorted(refs):
            vb, vc = score_video(preds.get(vid, []), refs[vid], thr)
            b += vb
            c += vc
        per_threshold.append({"threshold": thr, "bleu4": b / len(refs), "cider": c / len(refs)})
    overall = {
        "bleu4": sum(r["bleu4"] for r in per_threshold) / len(per_threshold),
        "cider": sum(r["cider"] for r in per_threshold) / len(per_threshold),
    }

    # Per-video CIDEr over the whole fixture, one document per video, the
    # first prediction of each video as the candidate.
    vids = sorted(refs)
    res = {i: [" ".join(tokenize(preds[v][0]["sentence"]))] for i, v in enumerate(vids)}
    gts = {i: [" ".join(tokenize(s)) for s in refs[v]["sentences"]] for i, v in enumerate(vids)}
    _, cider_per_video = Cider().compute_score(gts, res)

    out = {
        "dvc_eval": {"per_threshold": per_threshold, "overall": overall},
        "cider_first_prediction": {"videos": vids, "scores": [float(x) for x in cider_per_video]},
    }
    for v in out["cider_first_prediction"]["scores"] + [overall["bleu4"], overall["cider"]]:
        assert math.isfinite(v)
    with open(os.path.join(FIXTURES, "metric_recordings.json"), "w") as f:
        json.dump(out, f, indent=2)
        f.write("\n")

    # Vocabulary sizes, counted independently of the Rust build_vocab.
    counts = {}
    for v in refs.values():
        for s in v["sentences"]:
            for t in tokenize(s):
                counts[t] = counts.get(t, 0) + 1
    manifest = {
        "videos": len(refs),
        "event_counts": [len(refs[v]["timestamps"]) for v in sorted(refs)],
        "distinct_tokens": len(counts),
        "tokens_with_count_at_least_2": sum(1 for c in counts.values() if c >= 2),
    }
    with open(os.path.join(FIXTURES, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


if __name__ == "__main__":
    main()
