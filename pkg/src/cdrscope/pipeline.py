"""End-to-end orchestration: generate, graph, metrics, communities, features, train, evaluate."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd

from . import community as comm
from . import evaluation as ev
from . import features as feat
from . import graph as gr
from . import models as mdl
from . import netmetrics as nm
from .core import WindowTag, load_dataset_dir, parse_dataset, split_train_test, write_dataset
from .synth import GenConfig, GenConfigError, generate

log = logging.getLogger(__name__)

STAGES = ["generate", "graph", "metrics", "communities", "features", "train", "evaluate"]
GEN_PREFIX = "gen_"
_MODEL_RE = re.compile(r"^(glm-small|pca-(\d+)|pval-(\d+)|oversampled-(\d+)|lasso-logistic|lasso-svm|pca-aggr|random)$")
_BACKMAPPABLE = ("glm-small", "pca-", "pval-", "oversampled-", "pca-aggr", "lasso-logistic")


class ConfigError(ValueError):
    """Invalid pipeline configuration (CLI exit code 2)."""


class StageError(RuntimeError):
    """A stage failed; carries the stage name and a machine-readable record."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause

    def record(self) -> dict:
        return {"stage": self.stage, "error_type": type(self.cause).__name__, "message": str(self.cause)}


@dataclass
class PipelineConfig:
    seed: int = 0
    out_dir: str = "cdrscope_out"
    stages: list = field(default_factory=lambda: list(STAGES))
    data_dir: str | None = None          # existing events.csv / users.csv / towers.csv when not generating
    generator: dict = field(default_factory=dict)   # GenConfig overrides, given flat as gen_<name>
    split_fraction: float = 0.7
    window_tags: list = field(default_factory=lambda: [t.name for t in WindowTag])
    hour_of_week: bool = False
    response_window: int = 3600
    location_one_hot: bool = False
    feature_groups: list = field(default_factory=lambda: list(feat.GROUPS))
    models: list = field(default_factory=lambda: ["glm-small", "pca-50", "pval-05", "oversampled-2", "random"])
    p1: int = 50
    reference_model: str = "pca-50"
    lasso_lambdas: list | None = None
    lasso_n_lambdas: int = 20
    lasso_folds: int = 5
    lasso_max_outer: int = 50
    svm_C: float = 1.0
    svm_iters: int = 2000
    logistic_jitter: float = 1e-6
    separation_l2: float = 1e-4
    cutoff_max: int = 50
    degree_x_min: int = 5
    rewire: bool = True
    slpa_T: int = 100
    slpa_r: float = 0.05
    harmonic_exact_threshold: int = 50000
    harmonic_samples: int = 2000
    quantile: float = 0.95
    random_repeats: int = 200
    ablation: bool = True
    importance: bool = True
    vi_top_k: int = 4
    figures: bool = True
    threads: int = 1

    # ------------------------------------------------------------------
    @classmethod
    def from_dict(cls, obj: dict) -> "PipelineConfig":
        obj = dict(obj)
        names = {f.name for f in dataclasses.fields(cls)} - {"generator"}
        gen = {}
        for key in [k for k in obj if k.startswith(GEN_PREFIX)]:
            gen[key[len(GEN_PREFIX):]] = obj.pop(key)
        unknown = set(obj) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**obj, generator=gen)
        return cfg.validate()

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        try:
            with open(path) as fh:
                obj = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(obj)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        gen = d.pop("generator")
        d.update({GEN_PREFIX + k: v for k, v in sorted(gen.items())})
        return d

    def replace(self, **kw) -> "PipelineConfig":
        return dataclasses.replace(self, **kw).validate()

    def gen_config(self) -> GenConfig:
        try:
            return GenConfig.from_dict({**self.generator, "seed": self.seed})
        except (GenConfigError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    def config_hash(self) -> str:
        d = self.to_dict()
        for k in ("out_dir", "threads", "stages", "figures"):
            d.pop(k)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def validate(self) -> "PipelineConfig":
        bad = [s for s in self.stages if s not in STAGES]
        if bad:
            raise ConfigError(f"unknown stages: {bad}")
        if not 0 < self.split_fraction < 1:
            raise ConfigError("split_fraction must lie in (0, 1)")
        if not 0 < self.quantile < 1:
            raise ConfigError("quantile must lie in (0, 1)")
        for t in self.window_tags:
            if t not in WindowTag.__members__:
                raise ConfigError(f"unknown window tag {t}")
        for g in self.feature_groups:
            if g not in feat.GROUPS:
                raise ConfigError(f"unknown feature group {g}")
        if not self.models:
            raise ConfigError("at least one model is required")
        for m in self.models:
            match = _MODEL_RE.match(m)
            if not match:
                raise ConfigError(f"unknown model {m!r}")
            if match.group(2) is not None and int(match.group(2)) < 1:
                raise ConfigError("pca-<k> needs k >= 1")
            if match.group(4) is not None and int(match.group(4)) < 2:
                raise ConfigError("oversampling factor must be an integer >= 2")
        if len(set(self.models)) != len(self.models):
            raise ConfigError("duplicate model names")
        if self.reference_model not in self.models:
            raise ConfigError("reference_model must be one of models")
        if not self.reference_model.startswith(_BACKMAPPABLE):
            raise ConfigError("reference_model must be a logistic-type model")
        if self.p1 < 1 or self.cutoff_max < 2 or self.slpa_T < 1 or not 0 < self.slpa_r < 0.5:
            raise ConfigError("p1 >= 1, cutoff_max >= 2, slpa_T >= 1 and 0 < slpa_r < 0.5 required")
        if self.lasso_lambdas is not None:
            lams = np.asarray(self.lasso_lambdas, float)
            if lams.size == 0 or np.any(lams <= 0) or np.any(np.diff(lams) >= 0):
                raise ConfigError("lasso_lambdas must be positive and strictly descending")
        if self.lasso_folds < 2 or self.random_repeats < 1 or self.threads < 1 or self.vi_top_k < 1:
            raise ConfigError("lasso_folds >= 2, random_repeats >= 1, threads >= 1, vi_top_k >= 1 required")
        if "generate" in self.stages:
            self.gen_config()
        elif self.data_dir is None:
            raise ConfigError("data_dir is required when the generate stage is disabled")
        return self

    def feature_config(self) -> feat.FeatureConfig:
        return feat.FeatureConfig(tags=tuple(WindowTag[t] for t in self.window_tags),
                                  response_window=self.response_window, hour_of_week=self.hour_of_week,
                                  location_one_hot=self.location_one_hot)


# ---------------------------------------------------------------------------
# artifact helpers

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def array_hash(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


class Artifacts:
    """Writes stamped outputs under ``out_dir`` and keeps a manifest of their hashes."""

    def __init__(self, cfg: PipelineConfig):
        self.root = Path(cfg.out_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self.stamp = {"config_hash": cfg.config_hash(), "seed": cfg.seed}
        self.manifest_path = self.root / "manifest.json"
        self.files = {}
        if self.manifest_path.exists():
            try:
                old = json.loads(self.manifest_path.read_text())
                if old.get("config_hash") == self.stamp["config_hash"]:
                    self.files = old.get("artifacts", {})
            except json.JSONDecodeError:
                pass

    def path(self, rel) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def register(self, rel):
        self.files[str(rel)] = file_sha256(self.root / rel)

    def json(self, rel, obj):
        payload = {"stamp": self.stamp, **_jsonable(obj)}
        with open(self.path(rel), "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=False, allow_nan=False)
            fh.write("\n")
        self.register(rel)

    def csv(self, rel, df: pd.DataFrame):
        df.to_csv(self.path(rel), index=False, float_format="%.10g", lineterminator="\n")
        self.register(rel)

    def write_manifest(self):
        body = {**self.stamp, "artifacts": dict(sorted(self.files.items()))}
        self.manifest_path.write_text(json.dumps(body, indent=2) + "\n")


# ---------------------------------------------------------------------------
# stage context

@dataclass
class Context:
    cfg: PipelineConfig
    art: Artifacts
    dataset: object = None
    train_ids: list | None = None
    test_ids: list | None = None
    graph: object = None
    centrality: object = None
    reciprocity: object = None
    cover: object = None
    fm: object = None
    trained: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    # -- lazily loaded upstream state ----------------------------------
    def need_dataset(self):
        if self.dataset is None:
            d = Path(self.cfg.data_dir) if self.cfg.data_dir else self.art.root / "data"
            if (d / "dataset.json").exists():
                self.dataset = load_dataset_dir(d)
            else:
                self.dataset = parse_dataset(d / "events.csv", d / "users.csv", d / "towers.csv")
        if self.train_ids is None:
            # recomputed every time: a deterministic function of (dataset, fraction, seed)
            self.train_ids, self.test_ids = split_train_test(self.dataset, self.cfg.split_fraction, self.cfg.seed)
            self.art.json("split.json", {"fraction": self.cfg.split_fraction,
                                         "train": self.train_ids, "test": self.test_ids})
        return self.dataset

    def training_view(self):
        """The dataset with every test label replaced by 0, for all pre-evaluation stages."""
        ds = self.need_dataset()
        return ds.with_labels({u: 0 for u in self.test_ids})

    def need_graph(self):
        if self.graph is None:
            self.graph = gr.build_weighted(self.need_dataset())
        return self.graph

    def need_metrics(self):
        if self.centrality is None:
            path = self.art.root / "metrics" / "node_metrics.csv"
            if path.exists():
                long = pd.read_csv(path, dtype={"user_id": str})
                wide = long.pivot(index="user_id", columns="metric", values="value")
                self.centrality = wide["harmonic"].dropna()
                self.reciprocity = wide["reciprocity_weighted"].dropna()
            else:
                stage_metrics(self)
        return self.centrality, self.reciprocity

    def need_cover(self):
        if self.cover is None:
            path = self.art.root / "communities" / "memberships.json"
            if path.exists():
                obj = json.loads(path.read_text())
                comms = [frozenset(c) for c in obj["communities"]]
                self.cover = comm.CommunityCover(comms, obj["memberships"], obj["T"], obj["r"], obj["seed"],
                                                 obj["labels"])
            else:
                stage_communities(self)
        return self.cover

    def need_features(self):
        if self.fm is None:
            d = self.art.root / "features"
            if (d / "features.schema.json").exists():
                self.fm = feat.FeatureMatrix.load(d)
            else:
                stage_features(self)
        return self.fm


# ---------------------------------------------------------------------------
# stages

def stage_generate(ctx: Context):
    cfg = ctx.cfg
    ds = generate(cfg.gen_config())
    paths = write_dataset(ds, ctx.art.path("data"))
    for p in paths.values() if isinstance(paths, dict) else []:
        ctx.art.register(Path(p).relative_to(ctx.art.root))
    ctx.dataset = ds
    ctx.need_dataset()
    return {"n_users": len(ds.users), "n_events": int(len(ds.events)), "n_towers": len(ds.towers)}


def stage_graph(ctx: Context):
    cfg = ctx.cfg
    g = ctx.need_graph()
    a = ctx.art
    g.to_frame().to_csv(a.path("graph/edges.csv"), index=False, lineterminator="\n")
    a.register("graph/edges.csv")
    sweep = gr.cutoff_sweep(g, cfg.cutoff_max)
    a.json("graph/cutoff_sweep.json", sweep.to_json())
    dists = {}
    for c in (1, 2, 4, 8):
        if c > cfg.cutoff_max:
            break
        gc = gr.apply_cutoff(g, c)
        for direction in ("out", "in"):
            dists[f"c{c}-{direction}"] = gr.degree_distribution(gc, direction, cfg.degree_x_min)
    a.json("graph/degree_distribution.json", {k: v.to_json() for k, v in dists.items()})
    summary = {"n_nodes": g.n_nodes, "n_edges": g.n_edges, "w_avg": g.w_avg,
               "reciprocated_pair_fraction": nm.reciprocated_pair_fraction(g),
               "reference_reciprocated_pair_fraction": nm.REFERENCE.get("reciprocated_pair_fraction")}
    if cfg.rewire:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            rw = gr.rewire_random(g, seed=cfg.seed)
        summary["rewired_reciprocated_pair_fraction"] = nm.reciprocated_pair_fraction(rw)
    a.json("graph/summary.json", summary)
    if cfg.figures:
        from . import plotting
        plotting.plot_cutoff_sweep(sweep, a.path("figures/cutoff_sweep.png"))
        plotting.plot_degree_distribution({k: v for k, v in dists.items() if k.endswith("out")},
                                          a.path("figures/degree_distribution.png"))
    return summary


def stage_metrics(ctx: Context):
    cfg = ctx.cfg
    g = ctx.need_graph()
    a = ctx.art
    hc = nm.harmonic_centrality(g, exact_threshold=cfg.harmonic_exact_threshold, n_samples=cfg.harmonic_samples,
                                seed=cfg.seed)
    recs = {v: nm.reciprocity(g, v) for v in nm.Variant}
    ctx.centrality = hc.as_series()
    ctx.reciprocity = recs[nm.Variant.WEIGHTED].as_series()
    node_metrics = {"harmonic": ctx.centrality}
    for v, r in recs.items():
        node_metrics[f"reciprocity_{v.value.lower()}"] = r.as_series()
    nm.write_node_metrics(a.path("metrics/node_metrics.csv"), node_metrics)
    a.register("metrics/node_metrics.csv")
    out = {"harmonic": hc.summary()}
    if cfg.rewire:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            rw = gr.rewire_random(g, seed=cfg.seed)
        out["harmonic_rewired"] = nm.harmonic_centrality(
            rw, exact_threshold=cfg.harmonic_exact_threshold, n_samples=cfg.harmonic_samples, seed=cfg.seed).summary()
    fits = {}
    for fam in nm.Family:
        try:
            fits[fam.value] = nm.fit_distribution(g.weight, fam)
        except nm.FitError as exc:
            ctx.notes.append(f"weight fit {fam.value} failed: {exc}")
    out["weight_fits"] = {k: f.to_json() for k, f in fits.items()}
    out["reciprocity_correlation"] = nm.reciprocity_metric_correlation(g)
    out["reciprocity_correlation_no_spikes"] = nm.reciprocity_metric_correlation(g, exclude_spikes=True)
    out["reference"] = nm.REFERENCE
    a.json("metrics/metrics.json", out)
    if cfg.figures:
        from . import plotting
        if fits:
            plotting.plot_fit(g.weight, fits, a.path("figures/weight_fits.png"), xlabel="$w_{ij}$")
        plotting.plot_reciprocity({v.value: r.values for v, r in recs.items()}, a.path("figures/reciprocity.png"))
    return {"harmonic_mean": hc.mean}


def stage_communities(ctx: Context):
    cfg = ctx.cfg
    g = ctx.need_graph()
    a = ctx.art
    cover = comm.slpa_detect(g, T=cfg.slpa_T, r=cfg.slpa_r, seed=cfg.seed)
    ctx.cover = cover
    overlap = comm.district_overlap(cover, ctx.need_dataset().users)
    a.csv("communities/communities.csv", cover.to_frame())
    a.json("communities/summary.json", comm.cover_summary(cover, overlap))
    a.json("communities/memberships.json", {
        "T": cover.T, "r": cover.r, "seed": cover.seed, "labels": cover.labels,
        "communities": [sorted(c) for c in cover.communities],
        "memberships": {k: dict(sorted(v.items())) for k, v in sorted(cover.memberships.items())}})
    if cfg.figures:
        from . import plotting
        plotting.plot_community_sizes(cover.sizes(), a.path("figures/community_sizes.png"))
    return {"n_communities": len(cover.communities)}


def build_features(dataset, train_ids, cfg: PipelineConfig, graph=None, centrality=None, reciprocity=None,
                   cover=None) -> feat.FeatureMatrix:
    cols = feat.extract_all(dataset, train_ids, graph=graph, centrality=centrality, reciprocity=reciprocity,
                            cover=cover, config=cfg.feature_config(), groups=cfg.feature_groups)
    return feat.assemble_and_normalize(cols, train_ids)


def stage_features(ctx: Context):
    cfg = ctx.cfg
    view = ctx.training_view()
    cen = rec = cover = None
    if "NETWORK" in cfg.feature_groups:
        cen, rec = ctx.need_metrics()
        cover = ctx.need_cover()
    fm = build_features(view, ctx.train_ids, cfg, ctx.need_graph(), cen, rec, cover)
    ctx.fm = fm
    a = ctx.art
    fm.save(a.path("features"))
    for name in ("features.parquet", "features_raw.parquet", "features.schema.json"):
        a.register(f"features/{name}")
    y_train = view.labels(ctx.train_ids)
    pb = feat.point_biserial_table(fm, y_train, ctx.train_ids)
    a.csv("features/point_biserial.csv", pb)
    if cfg.figures:
        from . import plotting
        plotting.plot_bars(pb["feature"], pb["r_pb"], a.path("figures/point_biserial.png"), "point-biserial r")
    return {"shape": list(fm.shape), "group_counts": fm.group_counts(), "dropped": len(fm.dropped)}


# ---------------------------------------------------------------------------
# models

@dataclass
class TrainedModel:
    name: str
    scorer: Callable            # ids -> decision values
    design: Callable | None     # ids -> design matrix in interpretable feature space
    names: list                 # design column names
    intercept: float = 0.0
    beta: np.ndarray | None = None
    artifact: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def score(self, ids) -> np.ndarray:
        return self.scorer(list(ids))


def _fit_logistic(Z, y, cfg: PipelineConfig, notes: list, label: str) -> mdl.LogisticModel:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        m = mdl.logistic_fit(Z, y, jitter=cfg.logistic_jitter)
    if not m.diagnostics["converged"]:
        notes.append(f"{label}: no finite MLE (quasi-separation); refitted with l2={cfg.separation_l2}")
        m = mdl.logistic_fit(Z, y, jitter=cfg.logistic_jitter, l2=cfg.separation_l2)
        m.diagnostics["separation_fallback"] = True
    return m


class ModelTrainer:
    """Fits the configured model ladder on train rows only."""

    def __init__(self, fm: feat.FeatureMatrix, train_ids, y_train, cfg: PipelineConfig, age=None):
        self.fm = fm
        self.train_ids = list(train_ids)
        self.y = np.asarray(y_train, dtype=float)
        self.cfg = cfg
        self.age = age              # Series user_id -> age, used by glm-small
        self._bases = {}
        self._lasso = None
        self._aggr = None

    def basis(self, fm, k, key="full"):
        if (key, k) not in self._bases:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", RuntimeWarning)
                b = mdl.pca_fit(fm.rows(self.train_ids), k)
            self._bases[(key, k)] = (b, [str(w.message) for w in caught])
        return self._bases[(key, k)]

    def _pca_logistic(self, name, fm, k, key="full", pval=None, factor=None):
        basis, notes = self.basis(fm, k, key)
        notes = list(notes)
        Z = basis.transform(fm.rows(self.train_ids))
        keep = np.arange(basis.p1)
        m = _fit_logistic(Z, self.y, self.cfg, notes, name)
        if pval is not None:
            keep, _ = mdl.filter_by_pvalue(m, Z, self.y, pval)
            m = _fit_logistic(Z[:, keep], self.y, self.cfg, notes, name)
        if factor is not None:
            Zo, yo, _ = mdl.oversample(Z[:, keep], self.y, factor)
            m = _fit_logistic(Zo, yo, self.cfg, notes, name)
        sub = basis.subset(keep)
        beta = ev.backmap_coefficients(sub, m.coef)
        intercept = m.intercept - float(sub.center @ beta)

        def scorer(ids, fm=fm, sub=sub, m=m):
            return m.decision(sub.transform(fm.rows(ids)))

        art = {"model": name, "p1": int(basis.p1), "kept_components": keep.tolist(),
               "explained_variance": basis.explained.tolist(), "logistic": m.to_json()}
        tm = TrainedModel(name, scorer, fm.rows, fm.columns, intercept, beta, art, notes)
        tm.basis = sub
        return tm

    def fit(self, name: str) -> TrainedModel:
        cfg = self.cfg
        match = _MODEL_RE.match(name)
        if name == "random":
            seed = cfg.seed

            def scorer(ids):
                rng = np.random.default_rng([seed, len(ids)])
                return rng.random(len(ids))
            return TrainedModel(name, scorer, None, [], artifact={"model": "random", "seed": seed})
        if match.group(2) is not None:
            return self._pca_logistic(name, self.fm, int(match.group(2)))
        if match.group(3) is not None:
            return self._pca_logistic(name, self.fm, cfg.p1, pval=float("0." + match.group(3)))
        if match.group(4) is not None:
            return self._pca_logistic(name, self.fm, cfg.p1, factor=int(match.group(4)))
        if name == "pca-aggr":
            if self._aggr is None:
                self._aggr = feat.aggregate_features(self.fm)
            k = min(cfg.p1, self._aggr.shape[1])
            return self._pca_logistic(name, self._aggr, k, key="aggr")
        if name == "glm-small":
            return self._glm_small()
        if name in ("lasso-logistic", "lasso-svm"):
            lasso = self._fit_lasso()
            if name == "lasso-logistic":
                art = {"model": name, **lasso.to_json()}
                return TrainedModel(name, lambda ids: lasso.decision(self.fm.rows(ids)), self.fm.rows,
                                    self.fm.columns, lasso.intercept, lasso.coef, art)
            support = lasso.selected()
            if len(support) == 0:
                raise mdl.ModelError("lasso selected no feature; lasso-svm has no input")
            svm = mdl.linear_svm_fit(self.fm.rows(self.train_ids)[:, support], self.y, cfg.svm_C, cfg.seed,
                                     n_iter=cfg.svm_iters)
            svm.support = support
            names = [self.fm.columns[j] for j in support]
            art = {"model": name, "support_names": names, **svm.to_json()}
            return TrainedModel(name, lambda ids: svm.decision(self.fm.rows(ids)[:, support]),
                                lambda ids: self.fm.rows(ids)[:, support], names, svm.intercept, svm.coef, art)
        raise ValueError(f"unknown model {name}")

    def _fit_lasso(self):
        if self._lasso is None:
            cfg = self.cfg
            X = self.fm.rows(self.train_ids)
            lams = cfg.lasso_lambdas
            if lams is None:
                lams = mdl.default_lambda_grid(X, self.y, cfg.lasso_n_lambdas)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                self._lasso = mdl.lasso_logistic_fit(X, self.y, lams, cfg.lasso_folds, cfg.seed,
                                                     max_outer=cfg.lasso_max_outer)
        return self._lasso

    def _glm_small(self):
        cols = [c for c in ("netDegree", "netReciprocity", "netHarmonic", "netCommunityRank", "netCommunitySize",
                            "towerPd1") if c in self.fm.columns]
        idx = [self.fm.columns.index(c) for c in cols]
        age = self.age
        names = list(cols)
        if age is not None:
            a_tr = age.reindex(self.train_ids).to_numpy(float)
            mu, sd = a_tr.mean(), a_tr.std() or 1.0
            names.append("age")

        def design(ids):
            X = self.fm.rows(ids)[:, idx]
            if age is not None:
                X = np.column_stack([X, (age.reindex(list(ids)).to_numpy(float) - mu) / sd])
            return X

        if not names:
            raise mdl.ModelError("glm-small has no available input columns")
        notes = []
        m = _fit_logistic(design(self.train_ids), self.y, self.cfg, notes, "glm-small")
        art = {"model": "glm-small", "inputs": names, "logistic": m.to_json()}
        return TrainedModel("glm-small", lambda ids: m.decision(design(ids)), design, names, m.intercept,
                            m.coef.copy(), art, notes)


def train_models(fm, train_ids, y_train, cfg: PipelineConfig, age=None, names=None) -> dict:
    trainer = ModelTrainer(fm, train_ids, y_train, cfg, age)
    return {n: trainer.fit(n) for n in (names or cfg.models)}


def _age_series(dataset):
    return pd.Series({u: r.age for u, r in dataset.users.items()}, dtype=float)


def stage_train(ctx: Context):
    cfg = ctx.cfg
    fm = ctx.need_features()
    view = ctx.training_view()
    y_train = view.labels(ctx.train_ids)
    ctx.trained = train_models(fm, ctx.train_ids, y_train, cfg, _age_series(view))
    a = ctx.art
    rows = []
    test = sorted(ctx.test_ids)
    for name, tm in ctx.trained.items():
        a.json(f"models/{name}.json", {**tm.artifact, "notes": tm.notes})
        basis = getattr(tm, "basis", None)
        if basis is not None:
            np.save(a.path(f"models/{name}_components.npy"), basis.components)
            a.register(f"models/{name}_components.npy")
        s = tm.score(test)
        rows.append(pd.DataFrame({"model": name, "user_id": test, "score": s}))
        ctx.notes.extend(tm.notes)
    a.csv("models/test_scores.csv", pd.concat(rows, ignore_index=True))
    return {"models": list(ctx.trained)}


# ---------------------------------------------------------------------------
# evaluation

def compare_models(report: dict) -> pd.DataFrame:
    """Models sorted by recall at the fixed threshold (then precision, AUC, name)."""
    rows = [{"model": k, **{m: v[m] for m in ("recall", "fallout", "precision", "auc")}}
            for k, v in report["models"].items()]
    df = pd.DataFrame(rows, columns=["model", "recall", "fallout", "precision", "auc"])
    return df.sort_values(["recall", "precision", "auc", "model"], ascending=[False, False, False, True],
                          kind="mergesort").reset_index(drop=True)


def _model_metrics(tm: TrainedModel, test_ids, y_test, cfg: PipelineConfig):
    scores = tm.score(test_ids)
    m = ev.quantile_metrics(scores, y_test, test_ids, cfg.quantile)
    roc = ev.roc_curve(scores, y_test)
    if tm.name == "random":
        base = ev.random_baseline(y_test, test_ids, cfg.quantile, cfg.random_repeats, cfg.seed)
        m.update({k: base[k] for k in ("recall", "fallout", "precision")})
        m["n_repeats"] = base["n_repeats"]
        m["auc"] = 0.5
    else:
        m["auc"] = roc.auc
    return scores, m, roc


def stage_evaluate(ctx: Context):
    cfg = ctx.cfg
    a = ctx.art
    ds = ctx.need_dataset()
    fm = ctx.need_features()
    if not ctx.trained:
        stage_train(ctx)
    test = sorted(ctx.test_ids)
    y_test = ds.labels(test)                 # the only place test labels are read
    view = ctx.training_view()
    y_train = view.labels(ctx.train_ids)

    # out_dir is left out so identical runs in different directories produce identical reports
    report = {"config": {k: v for k, v in cfg.to_dict().items() if k != "out_dir"},
              "n_train": len(ctx.train_ids), "n_test": len(test), "test_positives": int(y_test.sum()),
              "feature_shape": list(fm.shape),
              "group_counts": fm.group_counts(), "dropped_constant_columns": len(fm.dropped),
              "models": {}, "references": ev.REFERENCE}
    scores, rocs = {}, {}
    for name, tm in ctx.trained.items():
        s, m, roc = _model_metrics(tm, test, y_test, cfg)
        scores[name], rocs[name] = s, roc
        report["models"][name] = {k: m[k] for k in ("recall", "fallout", "precision", "auc", "TP", "FP", "FN", "TN",
                                                    "n_flagged")}
        if name != "random":
            a.csv(f"evaluation/roc_{name}.csv", roc.frame())
    table = compare_models(report)
    report["comparison"] = table.to_dict(orient="records")
    a.csv("evaluation/model_comparison.csv", table)

    # ranking stability over the correctly flagged defaulters (score order);
    # the plain flagged-list comparison is kept alongside
    depth = mdl.n_flagged(len(test), cfg.quantile)
    positive = {u for u, yv in zip(test, y_test) if yv}
    ranked = [n for n in table["model"] if n != "random"]
    flagged = {n: mdl.rank_order(scores[n], test)[:depth] for n in ranked}
    hits = {n: [u for u in flagged[n] if u in positive] for n in ranked}
    pairs = []
    for i, x in enumerate(ranked):
        for yname in ranked[i + 1:]:
            row = {"model_a": x, "model_b": yname, "depth": min(len(hits[x]), len(hits[yname])),
                   "overlap": None, "aos": None}
            if row["depth"] > 0:
                row["overlap"], row["aos"] = ev.ranking_stability(hits[x], hits[yname])
            row["flagged_overlap"], row["flagged_aos"] = ev.ranking_stability(flagged[x], flagged[yname], depth)
            pairs.append(row)
    report["stability"] = {"depth": depth, "pairs": pairs,
                           "best_two": pairs[0] if pairs else None}
    if pairs:
        a.csv("evaluation/stability.csv", pd.DataFrame(pairs))

    ref = ctx.trained[cfg.reference_model]
    trainer = ModelTrainer(fm, ctx.train_ids, y_train, cfg, _age_series(view))

    def evaluate_subset(include_groups=None, exclude_names=None):
        mask = np.ones(fm.shape[1], bool)
        if include_groups is not None:
            mask &= fm.column_mask(groups=include_groups)
        if exclude_names:
            mask &= ~np.isin(fm.columns, list(exclude_names))
        if not mask.any():
            raise mdl.ModelError("no feature columns left")
        sub = fm.subset(mask)
        t = ModelTrainer(sub, ctx.train_ids, y_train, cfg, _age_series(view))
        tm = t.fit(cfg.reference_model)
        s = tm.score(test)
        return ev.quantile_metrics(s, y_test, test, cfg.quantile), tm

    if cfg.ablation:
        groups = [g for g in feat.GROUPS if g in set(fm.groups)]
        base = report["models"][cfg.reference_model]
        abl = ev.ablate_groups(lambda inc: evaluate_subset(include_groups=inc)[0], groups, base,
                               only="CORRESPONDENT" if "CORRESPONDENT" in groups else None)
        a.csv("evaluation/ablation.csv", abl)
        report["ablation"] = {"reference_model": cfg.reference_model, "rows": abl.to_dict(orient="records")}
        drops = abl[abl["run"].str.startswith("-")].dropna(subset=["delta_recall"])
        if len(drops):
            top = drops.sort_values(["delta_recall", "run"], ascending=[False, True], kind="mergesort").iloc[0]
            report["ablation"]["largest_drop_group"] = top["run"][1:]

    if cfg.importance and ref.beta is not None:
        X_tr = ref.design(ctx.train_ids)
        pr = ev.pratt_vi(X_tr, y_train, ref.beta, ref.intercept, ref.names)
        a.csv("evaluation/pratt.csv", pr.table)
        contrib, means = ev.mean_relative_contribution(ref.beta, X_tr, y_train, ref.names)
        a.csv("evaluation/contributions.csv", contrib)
        report["importance"] = {
            "reference_model": cfg.reference_model, "r2": pr.r2, "d_sum": pr.total,
            "top": pr.table.head(20).to_dict(orient="records"),
            "contributions_top": contrib.head(20)[["feature", "beta", "rel_default", "rel_paying"]]
            .to_dict(orient="records"),
            "score_means": means,
        }

        def refit(excluded):
            m, tm = evaluate_subset(exclude_names=excluded)
            return m, ev.pratt_vi(tm.design(ctx.train_ids), y_train, tm.beta, tm.intercept, tm.names)

        if ref.names == fm.columns:
            report["importance"]["vi_stability"] = ev.vi_stability_check(
                refit, pr, cfg.vi_top_k, report["models"][cfg.reference_model]["recall"])
        if cfg.figures:
            from . import plotting
            plotting.plot_bars(pr.table["feature"], pr.table["d"], a.path("figures/pratt.png"), "Pratt $d_j$")
    report["notes"] = sorted(set(ctx.notes))
    if cfg.figures:
        from . import plotting
        plotting.plot_roc({k: v for k, v in rocs.items() if k != "random"}, a.path("figures/roc.png"))
    a.json("report.json", report)
    return report


STAGE_FUNCS = {"generate": stage_generate, "graph": stage_graph, "metrics": stage_metrics,
               "communities": stage_communities, "features": stage_features, "train": stage_train,
               "evaluate": stage_evaluate}


def set_threads(n: int):
    """Cap BLAS/OpenMP and numba worker threads."""
    import numba
    from threadpoolctl import threadpool_limits

    with warnings.catch_warnings():
        # older system TBB: numba falls back to another layer on its own
        warnings.filterwarnings("ignore", message="The TBB threading layer")
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    return threadpool_limits(limits=n)


def run_pipeline(cfg: PipelineConfig, stages=None) -> dict:
    """Run the enabled stages in dependency order; returns the evaluation report (or stage summaries)."""
    cfg.validate()
    stages = [s for s in STAGES if s in (stages or cfg.stages)]
    art = Artifacts(cfg)
    ctx = Context(cfg, art)
    results = {}
    with set_threads(cfg.threads):
        for stage in stages:
            log.info("stage %s", stage)
            try:
                results[stage] = STAGE_FUNCS[stage](ctx)
            except (ConfigError, KeyboardInterrupt):
                raise
            except Exception as exc:
                err = StageError(stage, exc)
                art.path("error.json").write_text(json.dumps({**art.stamp, **err.record()}, indent=2) + "\n")
                raise err from exc
            finally:
                art.write_manifest()
    return results.get("evaluate", results)
