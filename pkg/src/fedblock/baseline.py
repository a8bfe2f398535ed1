"""Hand-picked whois/domain features and a random-forest comparison model."""
from __future__ import annotations

import csv
import datetime as dt
import math
import re
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .embedding import canonicalize_domains
from .errors import SingleClass
from .seeding import derive_seed

EPP_CODES = (
    "clientDeleteProhibited", "clientHold", "clientRenewProhibited",
    "clientTransferProhibited", "clientUpdateProhibited", "inactive", "ok",
    "pendingCreate", "pendingDelete", "pendingRenew", "pendingTransfer", "pendingUpdate",
    "serverDeleteProhibited", "serverHold", "serverRenewProhibited",
    "serverTransferProhibited", "serverUpdateProhibited",
)

_COUNTRY_FIELDS = {
    "admin_country": re.compile(r"^\s*admin\s+country\s*:\s*(.*)$", re.I),
    "tech_country": re.compile(r"^\s*tech\s+country\s*:\s*(.*)$", re.I),
    "registrant_country": re.compile(r"^\s*registrant\s+country\s*:\s*(.*)$", re.I),
}
_CREATION_RE = re.compile(r"^\s*creation\s+date\s*:\s*(\d{4}-\d{2}-\d{2})", re.I)
_EXPIRY_RE = re.compile(r"^\s*registry\s+expiry\s+date\s*:\s*(\d{4}-\d{2}-\d{2})", re.I)


def load_wordlist() -> frozenset:
    """Bundled list of the 10,000 most frequent English words (lowercase)."""
    text = resources.files("fedblock").joinpath("data/english_words.txt").read_text(encoding="utf-8")
    return frozenset(w for w in text.split() if w)


@dataclass
class HandFeatures:
    admin_country: str | int = -1
    tech_country: str | int = -1
    registrant_country: str | int = -1
    days_since_creation: float = -1.0
    days_since_expiry: float = 0.0
    english_word_ratio: float = -1.0
    epp_status: list[int] = field(default_factory=lambda: [0] * len(EPP_CODES))


def _parse_date(text):
    try:
        return dt.date.fromisoformat(text)
    except ValueError:
        return None


def extract_hand_features(bundle, reference_date: dt.date, wordlist, epp_codes=EPP_CODES) -> HandFeatures:
    """Registration features from a bundle; failures map to sentinels.

    Countries default to -1, days since creation to -1, days since expiry to
    0, and the English-word ratio to -1 when there are no domain tokens.
    """
    if not wordlist:
        raise ValueError("wordlist must be non-empty")
    feats = HandFeatures(epp_status=[0] * len(epp_codes))
    lines = [str(line) for line in bundle.whois.lines]
    for name, pattern in _COUNTRY_FIELDS.items():
        for line in lines:
            m = pattern.match(line)
            if m and m.group(1).strip():
                setattr(feats, name, m.group(1).strip().upper())
                break
    for line in lines:
        m = _CREATION_RE.match(line)
        if m and (d := _parse_date(m.group(1))) is not None:
            feats.days_since_creation = float((reference_date - d).days)
            break
    for line in lines:
        m = _EXPIRY_RE.match(line)
        if m and (d := _parse_date(m.group(1))) is not None:
            feats.days_since_expiry = float((reference_date - d).days)
            break
    try:
        tokens = canonicalize_domains(bundle.assoc).split()
    except ValueError:
        tokens = []
    if tokens:
        feats.english_word_ratio = sum(t in wordlist for t in tokens) / len(tokens)
    text = "\n".join(lines)
    for i, code in enumerate(epp_codes):
        if re.search(r"(?<![A-Za-z])" + re.escape(code) + r"(?![A-Za-z])", text, re.I):
            feats.epp_status[i] = 1
    return feats


class HandFeatureEncoder(BaseEstimator, TransformerMixin):
    """Bundles -> numeric matrix of hand features.

    Country fields are one-hot encoded over the codes seen during ``fit``
    plus an ``other`` column; unparsed countries encode as all zeros.
    """

    def __init__(self, reference_date=None, wordlist=None, epp_codes=EPP_CODES):
        self.reference_date = reference_date
        self.wordlist = wordlist
        self.epp_codes = epp_codes

    def _raw(self, bundles):
        ref = self.reference_date or dt.date(2022, 6, 1)
        words = self.wordlist if self.wordlist is not None else load_wordlist()
        return [extract_hand_features(b, ref, words, self.epp_codes) for b in bundles]

    def fit(self, X, y=None):
        raw = self._raw(X)
        self.countries_ = {
            name: sorted({getattr(f, name) for f in raw if getattr(f, name) != -1})
            for name in _COUNTRY_FIELDS
        }
        return self

    def transform(self, X):
        check_is_fitted(self, "countries_")
        return self.encode(self._raw(X))

    def encode(self, raw):
        rows = []
        for f in raw:
            row = []
            for name in _COUNTRY_FIELDS:
                vocab = self.countries_[name]
                value = getattr(f, name)
                onehot = [0.0] * (len(vocab) + 1)
                if value != -1:
                    onehot[vocab.index(value) if value in vocab else len(vocab)] = 1.0
                row.extend(onehot)
            row += [f.days_since_creation, f.days_since_expiry, f.english_word_ratio]
            row += [float(v) for v in f.epp_status]
            rows.append(row)
        return np.asarray(rows, dtype=np.float64)

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "countries_")
        names = []
        for field_name in _COUNTRY_FIELDS:
            names += [f"{field_name}={c}" for c in self.countries_[field_name]] + [f"{field_name}=other"]
        names += ["days_since_creation", "days_since_expiry", "english_word_ratio"]
        names += [f"epp_{c}" for c in self.epp_codes]
        return np.asarray(names, dtype=object)


def write_features_csv(path, domains, matrix, names) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["domain", *names])
        for d, row in zip(domains, matrix):
            writer.writerow([str(d), *[f"{v:g}" for v in row]])


# ---------------------------------------------------------------- CART

@dataclass
class ForestConfig:
    n_trees: int = 100
    max_depth: int = 12
    min_leaf: int = 2
    features_per_split: int | None = None
    seed: int = 0
    bootstrap: bool = True

    def __post_init__(self):
        for name in ("n_trees", "max_depth", "min_leaf"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.features_per_split is not None and self.features_per_split < 1:
            raise ValueError("features_per_split must be >= 1")


def _best_split(X, y, features, min_leaf):
    """Lowest weighted-Gini threshold split over the candidate features."""
    n = y.shape[0]
    best = (None, None, np.inf)
    for j in features:
        order = np.argsort(X[:, j], kind="stable")
        xs = X[order, j]
        ys = y[order]
        left_pos = np.cumsum(ys)[:-1]
        n_left = np.arange(1, n)
        n_right = n - n_left
        right_pos = ys.sum() - left_pos
        valid = (xs[1:] > xs[:-1]) & (n_left >= min_leaf) & (n_right >= min_leaf)
        if not valid.any():
            continue
        pl = left_pos / n_left
        pr = right_pos / n_right
        # n * weighted gini = n_l * 2 p_l (1-p_l) + n_r * 2 p_r (1-p_r)
        score = n_left * pl * (1 - pl) + n_right * pr * (1 - pr)
        score = np.where(valid, score, np.inf)
        k = int(np.argmin(score))
        if score[k] < best[2]:
            best = (j, (xs[k] + xs[k + 1]) / 2.0, score[k])
    return best[0], best[1]


class _Tree:
    """Array-encoded binary tree; leaves hold the class-1 frequency."""

    def __init__(self):
        self.feature, self.threshold, self.left, self.right, self.value = [], [], [], [], []

    def _add(self, feature=-1, threshold=0.0, value=0.0):
        self.feature.append(feature)
        self.threshold.append(threshold)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(value)
        return len(self.feature) - 1

    def fit(self, X, y, max_depth, min_leaf, n_candidates, rng):
        n_features = X.shape[1]
        stack = [(np.arange(X.shape[0]), 0, None, None)]
        while stack:
            idx, depth, parent, side = stack.pop()
            ys = y[idx]
            node = self._add(value=float(ys.mean()))
            if parent is not None:
                (self.left if side == "L" else self.right)[parent] = node
            pure = ys.min() == ys.max()
            if pure or depth >= max_depth or idx.shape[0] < 2 * min_leaf:
                continue
            if n_candidates >= n_features:
                cands = range(n_features)
            else:
                cands = np.sort(rng.choice(n_features, size=n_candidates, replace=False))
            j, thr = _best_split(X[idx], ys, cands, min_leaf)
            if j is None:
                continue
            self.feature[node] = int(j)
            self.threshold[node] = float(thr)
            go_left = X[idx, j] <= thr
            stack.append((idx[~go_left], depth + 1, node, "R"))
            stack.append((idx[go_left], depth + 1, node, "L"))
        self.feature = np.asarray(self.feature)
        self.threshold = np.asarray(self.threshold)
        self.left = np.asarray(self.left)
        self.right = np.asarray(self.right)
        self.value = np.asarray(self.value)
        return self

    def predict(self, X):
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = self.left[node] >= 0
        while active.any():
            cur = node[active]
            go_left = X[active, self.feature[cur]] <= self.threshold[cur]
            node[active] = np.where(go_left, self.left[cur], self.right[cur])
            active = self.left[node] >= 0
        return self.value[node]


class Forest:
    def __init__(self, trees, config):
        self.trees = trees
        self.config = config

    def predict_proba(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return np.mean([t.predict(X) for t in self.trees], axis=0)


def train_forest(X, y, config: ForestConfig) -> Forest:
    """Bagged CART trees on Gini impurity, deterministic in ``config.seed``."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.unique(y).size < 2:
        raise SingleClass("forest training needs both classes")
    n, n_features = X.shape
    k = config.features_per_split or math.ceil(math.sqrt(n_features))
    trees = []
    for t in range(config.n_trees):
        rng = np.random.default_rng(derive_seed(config.seed, "tree", t))
        idx = rng.integers(0, n, size=n) if config.bootstrap else np.arange(n)
        trees.append(_Tree().fit(X[idx], y[idx], config.max_depth, config.min_leaf, k, rng))
    return Forest(trees, config)


def forest_predict(forest: Forest, features) -> float:
    return float(forest.predict_proba(np.asarray(features, dtype=np.float64)[None, :])[0])


def cross_validate_forest(X, y, config: ForestConfig, k: int = 5) -> list[float]:
    """Stratified k-fold accuracies."""
    from sklearn.model_selection import StratifiedKFold

    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    folds = StratifiedKFold(n_splits=k, shuffle=True, random_state=derive_seed(config.seed, "cv") % 2**32)
    scores = []
    for train_idx, test_idx in folds.split(X, y):
        forest = train_forest(X[train_idx], y[train_idx], config)
        pred = (forest.predict_proba(X[test_idx]) >= 0.5).astype(int)
        scores.append(float(np.mean(pred == y[test_idx])))
    return scores


class RandomForestBaseline(BaseEstimator, ClassifierMixin):
    def __init__(self, n_trees=100, max_depth=12, min_leaf=2, features_per_split=None,
                 bootstrap=True, random_state=0):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.features_per_split = features_per_split
        self.bootstrap = bootstrap
        self.random_state = random_state

    def _config(self):
        return ForestConfig(self.n_trees, self.max_depth, self.min_leaf, self.features_per_split,
                            0 if self.random_state is None else int(self.random_state), self.bootstrap)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1]
        self.forest_ = train_forest(X, y, self._config())
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "forest_")
        p = self.forest_.predict_proba(check_array(X, dtype=np.float64))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)
