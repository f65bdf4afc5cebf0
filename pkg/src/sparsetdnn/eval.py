"""Cosine trial scoring, EER and normalised minDCF."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import cosine_score


@dataclass(frozen=True)
class Trial:
    enroll: str
    test: str
    target: bool


@dataclass
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray  # bool, True = target

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=bool)
        if self.scores.shape != self.labels.shape:
            raise ValueError("scores and labels differ in length")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("non-finite score")


def score_trials(embeddings: dict, trials: list[Trial]) -> ScoreSet:
    scores = []
    for t in trials:
        for uid in (t.enroll, t.test):
            if uid not in embeddings:
                raise KeyError(f"no embedding for utterance {uid!r}")
        scores.append(cosine_score(embeddings[t.enroll], embeddings[t.test]))
    return ScoreSet(np.array(scores), np.array([t.target for t in trials]))


def operating_points(s: ScoreSet):
    """FAR and FRR at every distinct score threshold plus reject-all.

    A trial is accepted when its score is >= the threshold.  Points are
    ordered by increasing threshold: FAR falls from 1 to 0, FRR rises 0 to 1.
    """
    n_tar = int(s.labels.sum())
    n_non = s.labels.size - n_tar
    if n_tar == 0 or n_non == 0:
        raise ValueError("both target and non-target trials are required")
    order = np.argsort(s.scores, kind="stable")
    scores = s.scores[order]
    tar = s.labels[order].astype(np.int64)
    # index of the first trial of each distinct score
    first = np.flatnonzero(np.r_[True, scores[1:] != scores[:-1]])
    tar_below = np.r_[0, np.cumsum(tar)][first]
    non_below = first - tar_below
    frr = np.r_[tar_below / n_tar, 1.0]
    far = np.r_[(n_non - non_below) / n_non, 0.0]
    return far, frr


def eer(s: ScoreSet) -> float:
    """Equal error rate in percent, interpolated at the FAR/FRR crossing."""
    far, frr = operating_points(s)
    d = frr - far
    i = int(np.argmax(d >= 0))
    if d[i] == 0 or i == 0:
        return 100.0 * float(far[i])
    a = -d[i - 1] / (d[i] - d[i - 1])
    return 100.0 * float(far[i - 1] + a * (far[i] - far[i - 1]))


def min_dcf(s: ScoreSet, p_target: float = 0.01, c_miss: float = 1.0, c_fa: float = 1.0) -> float:
    far, frr = operating_points(s)
    dcf = c_miss * p_target * frr + c_fa * (1 - p_target) * far
    return float(dcf.min() / min(c_miss * p_target, c_fa * (1 - p_target)))


def read_trials(path) -> list[Trial]:
    trials = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) < 3 or parts[2] not in ("target", "nontarget"):
            raise ValueError(f"{path}:{n}: expected '<enroll> <test> <target|nontarget>'")
        trials.append(Trial(parts[0], parts[1], parts[2] == "target"))
    return trials


def write_trials(trials: list[Trial], path, scores=None) -> None:
    lines = []
    for k, t in enumerate(trials):
        line = f"{t.enroll} {t.test} {'target' if t.target else 'nontarget'}"
        if scores is not None:
            line += f" {scores[k]:.8f}"
        lines.append(line + "\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_scores(path) -> ScoreSet:
    scores, labels = [], []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 4:
            raise ValueError(f"{path}:{n}: expected '<enroll> <test> <label> <score>'")
        labels.append(parts[2] == "target")
        scores.append(float(parts[3]))
    return ScoreSet(np.array(scores), np.array(labels))


def make_trials(utt_ids, labels, n_trials: int, seed: int = 0, target_fraction: float = 0.5) -> list[Trial]:
    """Random enrollment/test pairs of distinct utterances, targets first-class."""
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    by_spk = {k: np.flatnonzero(labels == k) for k in np.unique(labels)}
    multi = [k for k, v in by_spk.items() if len(v) >= 2]
    n_tar = int(round(n_trials * target_fraction))
    trials = []
    for _ in range(n_tar):
        k = multi[rng.integers(len(multi))]
        a, b = rng.choice(by_spk[k], 2, replace=False)
        trials.append(Trial(utt_ids[a], utt_ids[b], True))
    while len(trials) < n_trials:
        a, b = rng.integers(len(labels), size=2)
        if labels[a] != labels[b]:
            trials.append(Trial(utt_ids[a], utt_ids[b], False))
    order = rng.permutation(len(trials))
    return [trials[i] for i in order]
