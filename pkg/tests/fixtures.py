"""The 10-frame evaluation fixture and its hand-built oracle."""
import oracles

NA = None

# frame_id, expr truth, (valence, arousal) truth, expr pred, (valence, arousal) pred
TEN_FRAMES = [
    ("f0", 0, (0.1, 0.2), 0, (0.0, 0.1)),
    ("f1", 0, NA, 1, (0.2, 0.0)),
    ("f2", 1, (-0.5, 0.6), 1, (-0.4, 0.5)),
    ("f3", 4, (0.7, 0.3), 4, (0.6, 0.4)),
    ("f4", 4, NA, 4, (0.5, 0.5)),
    ("f5", NA, (-0.3, -0.2), 5, (-0.1, -0.3)),
    ("f6", 6, (0.2, 0.8), 3, (0.1, 0.6)),
    ("f7", 5, (-0.6, -0.5), 5, (-0.5, -0.4)),
    ("f8", NA, (0.0, 0.0), 0, (0.2, -0.1)),
    ("f9", 2, NA, 1, (0.0, 0.0)),
]


def hand_oracle(rows):
    """Confusion counts and CCC from plain loops over the retained frames."""
    pairs = [(t, p) for _, t, _, p, _ in rows if t is not None]
    f1s = []
    for c in range(7):
        tp = sum(1 for t, p in pairs if t == c and p == c)
        fp = sum(1 for t, p in pairs if t != c and p == c)
        fn = sum(1 for t, p in pairs if t == c and p != c)
        f1s.append(0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn))
    f1 = sum(f1s) / 7
    acc = sum(1 for t, p in pairs if t == p) / len(pairs)
    va = [(vt, vp) for _, _, vt, _, vp in rows if vt is not None]
    v = oracles.ccc([a[0] for a, _ in va], [b[0] for _, b in va])
    a = oracles.ccc([a[1] for a, _ in va], [b[1] for _, b in va])
    return {
        "macro_f1": f1,
        "total_accuracy": acc,
        "expr_score": 0.67 * f1 + 0.33 * acc,
        "valence_ccc": v,
        "arousal_ccc": a,
        "va_score": (v + a) / 2,
    }
