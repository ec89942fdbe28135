"""In-process hub-and-spoke federated averaging with byte-exact traffic.

Every round the hub broadcasts the full model to each node (downlink), each
node trains ``local_epochs`` on its own shard and uploads its full model
(uplink). Both directions cost ``payload_size(spec)`` bytes, the size of the
serialized checkpoint. The hub then replaces every parameter, BN running
statistics included, with the sample-count-weighted mean of the node values,
summed in float64 in ascending node order.
"""
from dataclasses import dataclass, field, replace

import numpy as np

from segkit.arch import build
from segkit.checkpoint import payload_size
from segkit.data import SynthTask, generate
from segkit.errors import ContractError
from segkit.tensor import Prng
from segkit.train import TrainConfig, Trainer, evaluate

HOLDOUT_SEED_OFFSET = 10_000


@dataclass
class FedConfig:
    nodes: int = 3
    rounds: int = 5
    local_epochs: int = 1
    samples_per_node: int = 8
    holdout: int = 8
    image_size: int = 64
    seed: int = 0
    data_seed: int = 0
    node_seeds: tuple = None  # per-node dataset seeds; default data_seed + i
    train: TrainConfig = field(default_factory=lambda: TrainConfig(batch_size=4))

    def validate(self):
        if self.nodes < 1 or self.rounds < 1:
            raise ContractError("nodes and rounds must both be >= 1")
        if self.node_seeds is not None and len(self.node_seeds) != self.nodes:
            raise ContractError("node_seeds needs one seed per node")
        return self

    def dataset_seed(self, i):
        return self.node_seeds[i] if self.node_seeds is not None else self.data_seed + i


@dataclass
class TrafficLedger:
    """Per-round, per-node byte counts."""

    rounds: list = field(default_factory=list)  # [{node: {"up": b, "down": b}}]

    def record(self, per_node):
        self.rounds.append(per_node)

    def round_bytes(self, r):
        return sum(v["up"] + v["down"] for v in self.rounds[r].values())

    @property
    def total(self):
        return sum(self.round_bytes(r) for r in range(len(self.rounds)))


class Node:
    """One site: a private shard plus a persistent local trainer."""

    def __init__(self, index, spec, images, masks, cfg, dtype=np.float32):
        self.index = index
        tcfg = replace(cfg.train, seed=cfg.seed + index)
        self.net = build(spec, Prng(cfg.seed + index), dtype)
        self.trainer = Trainer(self.net, images, masks, tcfg)

    @property
    def n_samples(self):
        return self.trainer.n_samples


def _check_structure(global_net, nodes):
    ref = [(n, p.data.shape) for n, p in global_net.named_parameters()]
    for node in nodes:
        if [(n, p.data.shape) for n, p in node.net.named_parameters()] != ref:
            raise ContractError(f"node {node.index} differs structurally from the global model")


def broadcast(global_net, node):
    for (_, g), (_, p) in zip(global_net.named_parameters(), node.net.named_parameters()):
        p.data[...] = g.data


def aggregate(global_net, node_nets, weights):
    """Weighted mean of node parameters written into ``global_net``.

    Accumulates ``w_i * p_i`` in float64 in list order, then divides by the
    total weight, so identical inputs reproduce exactly.
    """
    total = float(sum(weights))
    named = [list(n.named_parameters()) for n in node_nets]
    for j, (_, gp) in enumerate(global_net.named_parameters()):
        acc = np.zeros(gp.data.shape, dtype=np.float64)
        for params, w in zip(named, weights):
            acc += float(w) * params[j][1].data.astype(np.float64)
        gp.data[...] = (acc / total).astype(gp.data.dtype)
    return global_net


def run_round(global_net, nodes, cfg, spec=None):
    spec = spec or global_net.spec
    _check_structure(global_net, nodes)
    size = payload_size(spec)
    ledger_entry = {}
    for node in nodes:  # ascending index
        broadcast(global_net, node)
        for _ in range(cfg.local_epochs):
            node.trainer.run_epoch()
        ledger_entry[node.index] = {"down": size, "up": size}
    aggregate(global_net, [n.net for n in nodes], [n.n_samples for n in nodes])
    return global_net, ledger_entry


def make_nodes(cfg, spec, dtype=np.float32):
    nodes = []
    for i in range(cfg.nodes):
        pairs = generate(SynthTask(size=cfg.image_size, seed=cfg.dataset_seed(i)),
                         cfg.samples_per_node)
        images = np.concatenate([p[0] for p in pairs])
        masks = np.concatenate([p[1] for p in pairs])
        nodes.append(Node(i, spec, images, masks, cfg, dtype))
    return nodes


def holdout_set(cfg):
    pairs = generate(SynthTask(size=cfg.image_size,
                               seed=cfg.data_seed + HOLDOUT_SEED_OFFSET), cfg.holdout)
    return [(f"{i:04d}", img, msk) for i, (img, msk) in enumerate(pairs)]


def simulate(cfg, spec, dtype=np.float32, return_state=False):
    """Run the full simulation; returns the JSON-ready report."""
    cfg.validate()
    spec = spec.with_(input_size=cfg.image_size)
    global_net = build(spec, Prng(cfg.seed), dtype)
    nodes = make_nodes(cfg, spec, dtype)
    held = holdout_set(cfg)
    ledger = TrafficLedger()
    per_round = []
    for r in range(cfg.rounds):
        global_net, entry = run_round(global_net, nodes, cfg, spec)
        ledger.record(entry)
        _, dice, _ = evaluate(global_net, held)
        per_round.append({"round": r + 1, "dice": round(dice, 8),
                          "bytes": ledger.round_bytes(r)})
    report = {"arch": spec.name, "rounds": cfg.rounds, "nodes": cfg.nodes,
              "payload_bytes": payload_size(spec), "total_bytes": ledger.total,
              "per_round": per_round}
    if return_state:
        return report, global_net, nodes, ledger
    return report
