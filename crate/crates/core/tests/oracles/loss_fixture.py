"""Expected matching and loss values for the fixed fixture in tests/training.rs.

Brute-forces the assignment and evaluates the localization, classification
and counter terms directly from their definitions.
"""
import itertools
import math

intervals = [[0.1, 0.4], [0.5, 0.9], [0.2, 0.3]]
cls = [[0.8, 0.1, 0.2], [0.3, 0.7, 0.6], [0.5, 0.5, 0.5]]
gt = [[0.1, 0.5], [0.6, 0.8]]
labels = [[1, 0, 0], [0, 1, 1]]
counter = [0.1, 0.2, 0.6, 0.1]
gamma, alpha = 2.0, 0.25
c_loc, c_cls = 2.0, 1.0


def giou(p, g):
    inter = max(0.0, min(p[1], g[1]) - max(p[0], g[0]))
    union = (p[1] - p[0]) + (g[1] - g[0]) - inter
    hull = max(p[1], g[1]) - min(p[0], g[0])
    return inter / union - (hull - union) / hull


def focal(ps, ys):
    total = 0.0
    for p, y in zip(ps, ys):
        total += -alpha * y * (1 - p) ** gamma * math.log(p) - (1 - alpha) * (1 - y) * p ** gamma * math.log(1 - p)
    return total / len(ps)


def cost(i, j):
    return c_loc * (1 - giou(intervals[i], gt[j])) + c_cls * focal(cls[i], labels[j])


best = min(itertools.permutations(range(3), 2), key=lambda qs: sum(cost(q, j) for j, q in enumerate(qs)))
pairs = sorted((q, j) for j, q in enumerate(best))
loc = sum(1 - giou(intervals[q], gt[j]) for q, j in pairs) / len(pairs)
targets = [[0, 0, 0] for _ in intervals]
for q, j in pairs:
    targets[q] = labels[j]
cls_loss = sum(focal(cls[i], targets[i]) * 3 for i in range(3)) / 9
counter_loss = -math.log(counter[len(gt)])
print("pairs", pairs)
print("loc", repr(loc))
print("cls", repr(cls_loss))
print("counter", repr(counter_loss))
print("weighted without caption", repr(2 * loc + cls_loss + 0.5 * counter_loss))
