"""WER scoring and the analysis breakdowns: length terciles and word types.

WER is word-level minimum edit distance with unit costs; ties prefer
substitution over insertion over deletion so counts are deterministic.
The word-type split follows the rare-word rule: a word is "rare" when it
appears fewer than `threshold` times in the paired training transcripts.
Utterances with no rare word are Common; utterances whose rare words all
reach the threshold once the unpaired text is included are Fixed-by-LM;
anything still under the threshold in the union is Rare/OOV.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

LENGTH_BUCKETS = ("Short", "Medium", "Long")
WORD_TYPES = ("Common", "Fixed by LM", "Rare/OOV")


@dataclass
class WerResult:
    substitutions: int
    insertions: int
    deletions: int
    ref_words: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer(self) -> float:
        return self.errors / self.ref_words

    def __add__(self, other: "WerResult") -> "WerResult":
        return WerResult(
            self.substitutions + other.substitutions,
            self.insertions + other.insertions,
            self.deletions + other.deletions,
            self.ref_words + other.ref_words,
        )


def wer(reference: list[str], hypothesis: list[str]) -> WerResult:
    """Minimum-edit-distance WER with sub > ins > del tie preference."""
    n, m = len(reference), len(hypothesis)
    if n == 0:
        raise ValueError("reference must contain at least one word")
    # dp[i][j] = (cost, subs, ins, dels) for ref[:i] vs hyp[:j]
    dp = [[(0, 0, 0, 0)] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        dp[i][0] = (i, 0, 0, i)
    for j in range(1, m + 1):
        dp[0][j] = (j, 0, j, 0)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            c, s, ins, dl = dp[i - 1][j - 1]
            if reference[i - 1] == hypothesis[j - 1]:
                best = (c, s, ins, dl)
            else:
                best = (c + 1, s + 1, ins, dl)
            c, s, ins, dl = dp[i][j - 1]
            if c + 1 < best[0]:
                best = (c + 1, s, ins + 1, dl)
            c, s, ins, dl = dp[i - 1][j]
            if c + 1 < best[0]:
                best = (c + 1, s, ins, dl + 1)
            dp[i][j] = best
    cost, s, ins, dl = dp[n][m]
    assert cost == s + ins + dl
    return WerResult(s, ins, dl, n)


def corpus_wer(references: dict[str, list[str]], hypotheses: dict[str, list[str]]) -> WerResult:
    """Pooled WER: summed edit counts over summed reference words."""
    if set(references) != set(hypotheses):
        raise ValueError("reference and hypothesis utterance ids differ")
    total = WerResult(0, 0, 0, 0)
    for uid in sorted(references):
        total = total + wer(references[uid], hypotheses[uid])
    return total


def categorize(
    references: dict[str, list[str]],
    paired_counts: Counter,
    union_counts: Counter,
    threshold: int = 10,
) -> dict[str, str]:
    """Word-type category per utterance id (Common / Fixed by LM / Rare/OOV)."""
    out = {}
    for uid, words in references.items():
        rare = [w for w in words if paired_counts[w] < threshold]
        if not rare:
            out[uid] = "Common"
        elif all(union_counts[w] >= threshold for w in rare):
            out[uid] = "Fixed by LM"
        else:
            out[uid] = "Rare/OOV"
    return out


def length_terciles(references: dict[str, list[str]]) -> dict[str, str]:
    """Short/Medium/Long split by reference word count; sizes differ by <= 1."""
    order = sorted(references, key=lambda uid: (len(references[uid]), uid))
    n = len(order)
    sizes = [(n + 2) // 3, (n + 1) // 3, n // 3]
    out = {}
    pos = 0
    for bucket, size in zip(LENGTH_BUCKETS, sizes):
        for uid in order[pos : pos + size]:
            out[uid] = bucket
        pos += size
    return out


@dataclass
class CategoryRow:
    name: str
    n_utts: int
    baseline_wer: float
    fused_wer: dict[str, float]
    relative_reduction: dict[str, float]


@dataclass
class BreakdownReport:
    length_rows: list[CategoryRow]
    word_type_rows: list[CategoryRow]
    overall: CategoryRow

    def to_dict(self) -> dict:
        def rows(rs):
            return [
                {
                    "name": r.name,
                    "n_utts": r.n_utts,
                    "baseline_wer": r.baseline_wer,
                    "fused_wer": r.fused_wer,
                    "relative_reduction": r.relative_reduction,
                }
                for r in rs
            ]

        return {
            "length": rows(self.length_rows),
            "word_type": rows(self.word_type_rows),
            "overall": rows([self.overall])[0],
        }

    def to_text(self) -> str:
        modes = sorted(self.overall.fused_wer)
        lines = []
        header = f"{'category':>14} {'#utts':>6} {'base WER':>9}"
        for m in modes:
            header += f" {m + ' WERR':>12}"
        lines.append(header)
        for title, rows in (("Average Length", self.length_rows), ("Word Type", self.word_type_rows)):
            lines.append(f"-- {title} --")
            for r in rows:
                line = f"{r.name:>14} {r.n_utts:>6} {100 * r.baseline_wer:>8.2f}%"
                for m in modes:
                    line += f" {100 * r.relative_reduction[m]:>11.2f}%"
                lines.append(line)
        r = self.overall
        line = f"{'Overall':>14} {r.n_utts:>6} {100 * r.baseline_wer:>8.2f}%"
        for m in modes:
            line += f" {100 * r.relative_reduction[m]:>11.2f}%"
        lines.append(line)
        return "\n".join(lines) + "\n"


def _category_row(
    name: str,
    uids: list[str],
    references: dict[str, list[str]],
    baseline: dict[str, list[str]],
    fused: dict[str, dict[str, list[str]]],
) -> CategoryRow:
    refs = {uid: references[uid] for uid in uids}
    base = corpus_wer(refs, {uid: baseline[uid] for uid in uids}).wer if uids else 0.0
    fused_wer, rel = {}, {}
    for mode, hyps in fused.items():
        fw = corpus_wer(refs, {uid: hyps[uid] for uid in uids}).wer if uids else 0.0
        fused_wer[mode] = fw
        rel[mode] = (base - fw) / base if base > 0 else 0.0
    return CategoryRow(name, len(uids), base, fused_wer, rel)


def breakdown_report(
    references: dict[str, list[str]],
    baseline: dict[str, list[str]],
    fused: dict[str, dict[str, list[str]]],
    categories: dict[str, str],
) -> BreakdownReport:
    """Relative WER reduction per length tercile and word-type category.

    `fused` maps mode name (e.g. SF / CF / SF+CF) to its decodes. All
    systems must cover exactly the same utterance ids.
    """
    ids = set(references)
    for name, hyps in [("baseline", baseline)] + list(fused.items()):
        if set(hyps) != ids:
            raise ValueError(f"utterance ids of {name} do not match the references")
    if set(categories) != ids:
        raise ValueError("utterance ids of categories do not match the references")
    terciles = length_terciles(references)
    length_rows = [
        _category_row(
            bucket,
            sorted(uid for uid in ids if terciles[uid] == bucket),
            references,
            baseline,
            fused,
        )
        for bucket in LENGTH_BUCKETS
    ]
    word_rows = [
        _category_row(
            cat,
            sorted(uid for uid in ids if categories[uid] == cat),
            references,
            baseline,
            fused,
        )
        for cat in WORD_TYPES
    ]
    overall = _category_row("Overall", sorted(ids), references, baseline, fused)
    return BreakdownReport(length_rows, word_rows, overall)
