"""DNS filtering proxy: decisions, the UDP server and background retraining."""
from .decide import (BaseList, BlockResponse, Decision, ModelSet, ProxyConfig, ScoreCounter, Source,
                     Verdict, VerdictCache, decide)
from .retrain import ListTrainer, ListWatcher, RetrainManager
from .server import DnsProxy, Metrics, ProxyService, block_reply, scrape_metrics, serve

__all__ = [
    "BaseList", "BlockResponse", "Decision", "DnsProxy", "ListTrainer", "ListWatcher", "Metrics",
    "ModelSet", "ProxyConfig", "ProxyService", "RetrainManager", "ScoreCounter", "Source", "Verdict",
    "VerdictCache", "block_reply", "decide", "scrape_metrics", "serve",
]
