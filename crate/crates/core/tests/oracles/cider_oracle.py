"""Reference CIDEr values for the fixture corpora used in the Rust tests.

Plain CIDEr is computed here from scratch with numpy. CIDEr-D comes from
pycocoevalcap's CiderScorer when it is importable.

    python3 cider_oracle.py [path/to/pycocoevalcap/parent]
"""
import math
import sys
from collections import Counter

FIXTURES = {
    "three": (
        ["apply blush on cheeks with brush", "apply lipstick on lips", "apply powder on nose with puff"],
        ["apply blush on cheeks with sponge", "apply gloss on lips", "apply powder on chin with puff"],
    ),
    "five": (
        ["a b c d e", "a b x y", "z", "a a a b", "c d e f g h"],
        ["a b c d", "a b c d e f", "z z", "a b a b", "c d e f g h"],
    ),
}


def grams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def plain_cider(cands, refs):
    cands = [c.split() for c in cands]
    refs = [r.split() for r in refs]
    df = Counter()
    for r in refs:
        for n in range(1, 5):
            df.update(grams(r, n).keys())
    log_n = math.log(len(refs))

    def vec(tokens, n):
        return {g: tf * (log_n - math.log(max(1.0, df[g]))) for g, tf in grams(tokens, n).items()}

    scores = []
    for c, r in zip(cands, refs):
        total = 0.0
        for n in range(1, 5):
            vc, vr = vec(c, n), vec(r, n)
            dot = sum(w * vr.get(g, 0.0) for g, w in vc.items())
            nc = math.sqrt(sum(w * w for w in vc.values()))
            nr = math.sqrt(sum(w * w for w in vr.values()))
            if nc and nr:
                dot /= nc * nr
            total += dot
        scores.append(10.0 * total / 4.0)
    return sum(scores) / len(scores), scores


def cider_d(cands, refs):
    from pycocoevalcap.cider.cider_scorer import CiderScorer

    scorer = CiderScorer(n=4, sigma=6.0)
    for c, r in zip(cands, refs):
        scorer += (c, [r])
    return scorer.compute_score()


if __name__ == "__main__":
    if len(sys.argv) > 1:
        sys.path.insert(0, sys.argv[1])
    for name, (cands, refs) in FIXTURES.items():
        mean, per = plain_cider(cands, refs)
        print(f"{name} plain mean={mean!r} per={per!r}")
        try:
            mean_d, per_d = cider_d(cands, refs)
            print(f"{name} cider-d mean={float(mean_d)!r} per={[float(x) for x in per_d]!r}")
        except ImportError:
            print(f"{name} cider-d unavailable")
