"""Desk-scale ablation harness: train on a synthetic corpus split, then
score object-level retrieval on the held-out portion.

Three arms re-create the grouped-training comparison: a single-group
baseline, per-group heads without the cross-group term, and the full
configuration with shared objects coupling the groups.
"""

import numpy as np

from groupvec.data import (
    ObjectTable,
    ScaleGroups,
    SynthConfig,
    partition_by_scale,
    synth_generate_full,
)
from groupvec.metrics import EvalConfig, GroundTruth, mean_ap
from groupvec.retrieval import embed_all, embed_query, query
from groupvec.train import TrainConfig, train

EVAL_FRACTION = 0.25
N_QUERIES = 80

# The losses expect pair distances commensurate with sigma=3, the scale
# pretrained-backbone features produce.  The raw synthetic features are an
# order of magnitude hotter, so the harness rescales them once, up front,
# to land in the same distance regime.
FEATURE_SCALE = 0.15


class ScaledProvider:
    """Feature provider proxy that rescales every vector by one factor."""

    def __init__(self, base, scale: float):
        self.base = base
        self.scale = float(scale)

    def features_at(self, object_ids, area):
        return self.scale * self.base.features_at(object_ids, area)

    def base_features(self, object_ids):
        return self.scale * self.base.base_features(object_ids)


def split_corpus(synth_cfg: SynthConfig, eval_fraction=EVAL_FRACTION, n_queries=N_QUERIES,
                 feature_scale=FEATURE_SCALE):
    """Deterministic train/eval object split plus a query draw.

    The split depends only on the corpus seed, so every arm trains and
    is scored on identical data.  Queries are held-out objects.
    """
    table, _, model = synth_generate_full(synth_cfg)
    rng = np.random.default_rng(synth_cfg.seed + 777)
    perm = rng.permutation(np.asarray(table.ids))
    n_eval = int(round(eval_fraction * len(table)))
    if not 0 < n_queries <= n_eval:
        raise ValueError("need 0 < n_queries <= eval split size")
    eval_ids = {int(i) for i in perm[:n_eval]}
    train_table = ObjectTable([r for r in table if r.object_id not in eval_ids])
    eval_table = ObjectTable([r for r in table if r.object_id in eval_ids])
    queries = [int(i) for i in perm[:n_queries]]
    return train_table, eval_table, queries, ScaledProvider(model, feature_scale)


def arm_config(arm: str, steps: int, seed: int, **overrides) -> TrainConfig:
    arms = {
        "baseline": dict(groups=1, n_shared=0),
        "heads": dict(groups=4, n_shared=0),
        "full": dict(groups=4, n_shared=6),
    }
    if arm not in arms:
        raise ValueError(f"unknown arm {arm!r}")
    kw = dict(steps=steps, seed=seed)
    kw.update(arms[arm])
    kw.update(overrides)
    return TrainConfig(**kw)


def heldout_object_map(train_cfg: TrainConfig, train_table, eval_table, queries, model) -> float:
    """Train one arm and return held-out object-level mAP."""
    state, _ = train(train_cfg, train_table, model)
    trained = partition_by_scale(train_table, train_cfg.groups)
    assignment = np.array(
        [trained.route_area(a) for a in eval_table.areas], dtype=np.int64
    )
    eval_groups = ScaleGroups(train_cfg.groups, assignment, trained.boundaries, eval_table)
    store = embed_all(state.student, eval_table, model, eval_groups)
    gt = GroundTruth.from_table(eval_table)
    results = []
    for qid in queries:
        rec = eval_table.get(qid)
        q = embed_query(
            state.student,
            eval_groups,
            model.base_features(np.array([qid]))[0],
            rec.area,
        )
        results.append(query(store, q, topk=store.count, table=eval_table, query_id=qid))
    return mean_ap(results, gt, EvalConfig(), "object")


def run_ablation(corpus_seed: int, steps: int, train_seed: int, synth_cfg=None, **overrides):
    """mAP of all three arms on one corpus: dict arm -> held-out mAP."""
    cfg = synth_cfg if synth_cfg is not None else SynthConfig(seed=corpus_seed)
    train_table, eval_table, queries, model = split_corpus(cfg)
    out = {}
    for arm in ("baseline", "heads", "full"):
        tc = arm_config(arm, steps=steps, seed=train_seed, **overrides)
        out[arm] = heldout_object_map(tc, train_table, eval_table, queries, model)
    return out
