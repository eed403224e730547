"""Reference scores for the metric golden files.

Written from the metric definitions with plain Counters, without looking at
the C++ code paths. Regenerate with:

    python3 tests/oracles/metrics_oracle.py tests/golden
"""

import math
import random
import sys
from collections import Counter
from pathlib import Path


def ngrams(seq, n):
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def bleu(hyp, refs, max_n=4, smooth=True):
    if not hyp:
        return 0.0
    logs = 0.0
    for n in range(1, max_n + 1):
        h = ngrams(hyp, n)
        best = Counter()
        for r in refs:
            for g, c in ngrams(r, n).items():
                best[g] = max(best[g], c)
        num = sum(min(c, best[g]) for g, c in h.items())
        den = max(0, len(hyp) - n + 1)
        if smooth and n >= 2:
            num, den = num + 1, den + 1
        if num == 0 or den == 0:
            return 0.0
        logs += math.log(num / den)
    c = len(hyp)
    r = min((abs(len(x) - c), len(x)) for x in refs)[1]
    bp = math.exp(1 - r / c) if c < r else 1.0
    return bp * math.exp(logs / max_n)


def gleu(hyp, refs, max_n=4):
    if not hyp:
        return 0.0
    best = 0.0
    for r in refs:
        matched = hyp_total = ref_total = 0
        for n in range(1, max_n + 1):
            h, g = ngrams(hyp, n), ngrams(r, n)
            matched += sum((h & g).values())
            hyp_total += sum(h.values())
            ref_total += sum(g.values())
        if ref_total == 0:
            continue
        best = max(best, min(matched / hyp_total, matched / ref_total))
    return best


def doc_freq(corpus, max_n=4):
    df = Counter()
    for refs in corpus:
        seen = set()
        for r in refs:
            for n in range(1, max_n + 1):
                seen.update(ngrams(r, n).keys())
        df.update(seen)
    return df


def cider_d(hyp, refs, df, documents, sigma=6.0, max_n=4):
    log_docs = math.log(max(1.0, documents))

    def vec(seq):
        out = []
        for n in range(1, max_n + 1):
            out.append({g: c * (log_docs - math.log(max(1.0, df[g]))) for g, c in ngrams(seq, n).items()})
        return out

    def norm(v):
        return math.sqrt(sum(x * x for x in v.values()))

    vh = vec(hyp)
    total = 0.0
    for r in refs:
        vr = vec(r)
        delta = len(hyp) - len(r)
        pen = math.exp(-delta * delta / (2 * sigma * sigma))
        acc = 0.0
        for n in range(max_n):
            val = sum(min(w, vr[n][g]) * vr[n][g] for g, w in vh[n].items() if g in vr[n])
            nh, nr = norm(vh[n]), norm(vr[n])
            if nh != 0 and nr != 0:
                val /= nh * nr
            acc += val * pen
        total += acc / max_n
    return 10.0 * total / len(refs)


def repetition(seq):
    reps = sum(1 for a, b in zip(seq, seq[1:]) if a == b and a >= 4)
    return reps / max(1, len(seq) - 1)


def fmt(seq):
    return " ".join(map(str, seq))


def cases():
    hand = [
        ([4, 5, 6], [[4, 5, 6, 7]]),
        ([4, 5], [[6, 7]]),
        ([4], [[4, 5]]),
        ([4, 5, 6, 7], [[4, 5, 6, 7]]),
        ([4, 4, 5, 5, 4], [[4, 5, 4]]),
        ([], [[4, 5]]),
        ([4, 5, 6, 7, 8], [[4, 5, 9], [5, 6, 7, 8, 9, 10]]),
        ([9, 9, 9, 9], [[9, 8, 9, 8]]),
    ]
    rng = random.Random(1234)
    rand = []
    for _ in range(40):
        hyp = [rng.randint(4, 11) for _ in range(rng.randint(1, 9))]
        refs = [[rng.randint(4, 11) for _ in range(rng.randint(1, 9))] for _ in range(rng.randint(1, 3))]
        rand.append((hyp, refs))
    return hand + rand


def main(out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    all_cases = cases()
    corpus = [refs for _, refs in all_cases]
    df = doc_freq(corpus)
    files = {
        "bleu": lambda h, r: bleu(h, r),
        "bleu_nosmooth": lambda h, r: bleu(h, r, smooth=False),
        "gleu": gleu,
        "cider": lambda h, r: cider_d(h, r, df, len(corpus)),
        "repetition": lambda h, r: repetition(h),
    }
    for name, fn in files.items():
        with open(out / f"{name}.txt", "w") as f:
            f.write("# hyp | ref ; ref ... | expected\n")
            for hyp, refs in all_cases:
                f.write(f"{fmt(hyp)} | {' ; '.join(fmt(r) for r in refs)} | {fn(hyp, refs):.6f}\n")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "tests/golden")
