"""Independent direct-formula oracle for the hand-checkable scalar cases.

Pure stdlib math, no dependency on the package under test, so agreement with
the library is evidence, not tautology.
"""

import json
import math


def clip_identity_n2_tau1() -> float:
    # Symmetric two-way cross-entropy, 2x2 identity similarity matrix, tau=1.
    row = -math.log(math.e / (math.e + 1.0))
    return 0.5 * (row + row)


def infonce_1pos_2neg(tau: float) -> float:
    # One query: positive similarity 1, two negatives at 0.
    return -math.log(math.exp(1.0 / tau) / (math.exp(1.0 / tau) + 2.0))


def zero_shot_pair_probability() -> float:
    # Softmax over (s+, s-) = (0.3, 0.1) at tau = 1, present side.
    return math.exp(0.3) / (math.exp(0.3) + math.exp(0.1))


def auc_pair_counting() -> float:
    # scores (0.9, 0.2, 0.8, 0.1), labels (1, 0, 0, 1): count positive>negative
    # pairs, ties as half.
    scores, labels = [0.9, 0.2, 0.8, 0.1], [1, 0, 0, 1]
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


ORACLE = {
    "clip_identity_n2_tau1": clip_identity_n2_tau1(),
    "infonce_1pos_2neg_tau1": infonce_1pos_2neg(1.0),
    "infonce_1pos_2neg_tau007": infonce_1pos_2neg(0.07),
    # In-batch consistency on a 2x2 identity matrix is one cross-entropy row.
    "consistency_identity_n2_tau1": -math.log(math.e / (math.e + 1.0)),
    # Composite config A: l_con + lambda * l_moco at lambda = 1.
    "composite_config_a": clip_identity_n2_tau1() + infonce_1pos_2neg(1.0),
    "zero_shot_pair_probability": zero_shot_pair_probability(),
    "auc_pair_counting": auc_pair_counting(),
}

if __name__ == "__main__":
    print(json.dumps(ORACLE, indent=2))
