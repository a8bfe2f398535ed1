"""Background retraining when the user edits their lists.

Edits are coalesced: while a job is waiting to start, further edits fold
into it. A finished job writes the model file and hot-swaps it into the
proxy; a failed job leaves both untouched.
"""
from __future__ import annotations

import logging
import os
import threading
from pathlib import Path

import numpy as np

from .. import mlp
from ..embedding import instances_to_arrays, make_instances
from ..errors import EmptyDataset, NotFound
from ..filterlists import RuleKind, parse_list

logger = logging.getLogger(__name__)


def _list_domains(path, kind):
    with open(path, encoding="utf-8", errors="replace") as fh:
        rules = parse_list(fh.read().splitlines(), "auto")
    seen, out = set(), []
    for r in rules:
        if r.kind is kind and r.domain not in seen:
            seen.add(r.domain)
            out.append(r.domain)
    return out


class ListTrainer:
    """Fine-tunes a model on the domains of a block list and an allow list.

    Block-list domains get label 0, allow-list domains label 1. Domains that
    cannot be enriched or embedded are skipped. ``last_training_set`` holds
    the ``(domain, label)`` pairs of the most recent job.
    """

    def __init__(self, block_list, allow_list, enricher, embedder, config=None):
        self.block_list = Path(block_list)
        self.allow_list = Path(allow_list) if allow_list else None
        self.enricher = enricher
        self.embedder = embedder
        self.config = config or mlp.TrainConfig(epochs=5)
        self.last_training_set: list = []

    def training_set(self):
        pairs = [(d, 0) for d in _list_domains(self.block_list, RuleKind.DOMAIN_BLOCK)]
        if self.allow_list is not None:
            allow = _list_domains(self.allow_list, RuleKind.DOMAIN_BLOCK) + \
                _list_domains(self.allow_list, RuleKind.DOMAIN_ALLOW)
            pairs += [(d, 1) for d in allow]
        bundles, labels = [], []
        for domain, label in pairs:
            try:
                bundles.append(self.enricher.bundle(domain))
                labels.append(label)
            except (NotFound, OSError) as exc:
                logger.info("skipping %s: %s", domain, exc)
        instances, _ = make_instances(bundles, labels, self.embedder)
        if not instances:
            raise EmptyDataset("no trainable instances in the lists")
        return instances

    def __call__(self, current: mlp.ModelParams) -> mlp.ModelParams:
        instances = self.training_set()
        self.last_training_set = [(inst.domain, inst.label) for inst in instances]
        X, y = instances_to_arrays(instances)
        params, losses = mlp.train(current, X, y, self.config)
        if losses and not np.isfinite(losses[-1]):
            raise FloatingPointError("training diverged")
        return params


class RetrainManager:
    """Runs retraining jobs on one worker thread.

    ``train_fn(current_params) -> new_params`` does the work. On success the
    result is saved to ``model_path`` and handed to ``on_swap(params, version)``.
    """

    def __init__(self, train_fn, current: mlp.ModelParams, model_path=None, on_swap=None,
                 autostart=True):
        self.train_fn = train_fn
        self.current = current
        self.model_path = Path(model_path) if model_path else None
        self.on_swap = on_swap
        self.version = 0
        self.jobs_run = 0
        self.jobs_failed = 0
        self.coalesced = 0
        self._pending: list = []
        self._running = False
        self._cond = threading.Condition()
        self._closed = False
        self._worker = threading.Thread(target=self._loop, daemon=True)
        if autostart:
            self.start()

    def start(self) -> RetrainManager:
        if not self._worker.is_alive():
            self._worker.start()
        return self

    def notify(self, event=None) -> None:
        """Record an edit; at most one job waits at a time."""
        with self._cond:
            if self._pending:
                self.coalesced += 1
            self._pending.append(event)
            self._cond.notify_all()

    @property
    def pending(self) -> int:
        with self._cond:
            return 1 if self._pending else 0

    def wait_idle(self, timeout: float | None = None) -> bool:
        with self._cond:
            return self._cond.wait_for(lambda: not self._pending and not self._running, timeout)

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()
        if self._worker.is_alive():
            self._worker.join()

    def _loop(self):
        while True:
            with self._cond:
                self._cond.wait_for(lambda: self._pending or self._closed)
                if self._closed and not self._pending:
                    return
                events, self._pending = self._pending, []
                self._running = True
            try:
                self._run_job(events)
            finally:
                with self._cond:
                    self._running = False
                    self._cond.notify_all()

    def _run_job(self, events):
        self.jobs_run += 1
        try:
            params = self.train_fn(self.current)
            if self.model_path is not None:
                mlp.save_params(params, self.model_path)
        except Exception:
            self.jobs_failed += 1
            logger.exception("retraining failed after %d edit(s); keeping version %d",
                             len(events), self.version)
            return
        self.current = params
        self.version += 1
        logger.info("model version %d ready", self.version)
        if self.on_swap is not None:
            self.on_swap(params, self.version)


class ListWatcher:
    """Polls list files for modification and reports edits to a manager."""

    def __init__(self, paths, manager: RetrainManager):
        self.paths = [Path(p) for p in paths]
        self.manager = manager
        self._stamps = {p: self._stamp(p) for p in self.paths}

    @staticmethod
    def _stamp(path):
        try:
            st = os.stat(path)
        except FileNotFoundError:
            return None
        return (st.st_mtime_ns, st.st_size)

    def poll(self) -> list:
        changed = []
        for p in self.paths:
            stamp = self._stamp(p)
            if stamp != self._stamps[p]:
                self._stamps[p] = stamp
                changed.append(p)
                self.manager.notify(str(p))
        return changed
