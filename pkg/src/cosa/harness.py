"""Experiment orchestration: run configs, pipeline stages, ASR tables and reports.

A run lives in one output directory with a fixed layout::

    data/manifest.json            synthetic dataset
    models/ae.json, clf_<A>.json  checkpoints
    models/dict.json              prototype dictionaries
    attacks/<tag>/<stem>.json     one result per test input (+ <stem>.xyz cloud)
    defended/<defense>/<tag>/     purified adversarial clouds
    eval/<tag>.json               predictions of every classifier
    reports/                      CSV and markdown tables
    prototypes/<class>_<j>.xyz    decoded dictionary columns
    summaries/<command>.json      machine-readable stage summaries
    logs/<stage>.json             wall-clock timings (the only non-reproducible files)

``<tag>`` is ``<attack>_<surrogate>_eps<eps>`` where ``<attack>`` is an
ablation mode (``full`` is the attack proper) or ``pgd``.

Every stage writes a stamp holding a digest of its inputs; rerunning a stage
whose stamp matches is a no-op, so reruns are cheap and byte-identical.
ASR counts only inputs the evaluated model classifies correctly in clean form.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .attack import ABLATION_MODES, AttackConfig, AttackError, ablation_attack, pgd_baseline
from .defense import DEFENSES, DefenseConfig, apply_defense
from .geometry import PointCloud, distortion_report
from .nn import (TrainHyper, load_autoencoder, load_model, save_autoencoder, save_model,
                 train_autoencoder, train_classifier)
from .nn.models import ARCH_TAGS
from .subspace import (SparseCodingError, build_dictionaries, load_dictionaries,
                       save_dictionaries)
from .synthdata import DatasetConfig, load_manifest, make_dataset, read_cloud, write_cloud

log = logging.getLogger(__name__)

RUN_CONFIG_VERSION = 1
ATTACKS = ("cosa", "pgd")
ELIGIBLE_NOTE = ("ASR counts only inputs the evaluated classifier labels correctly in clean, "
                 "undefended form.")


class ConfigError(ValueError):
    """Invalid or unreadable run configuration."""


class StageError(RuntimeError):
    """A pipeline stage cannot run, e.g. because an upstream artifact is missing."""


# --- run configuration ------------------------------------------------------

@dataclass(frozen=True)
class DataSection:
    n_train: int = 50
    n_test: int = 10
    n: int = 256
    jitter: float = 0.01
    num_classes: int = 8


@dataclass(frozen=True)
class TrainSection:
    ae_epochs: int = 300
    clf_epochs: Dict[str, int] = field(default_factory=lambda: {"A": 100, "B": 100, "C": 300})
    lr: float = 1e-3
    d: int = 32
    h: int = 64
    k: int = 8


@dataclass(frozen=True)
class PathsSection:
    """Optional overrides; unset entries use the default layout under ``out_dir``."""
    manifest: Optional[str] = None
    autoencoder: Optional[str] = None
    dictionary: Optional[str] = None
    classifiers: Dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class RunConfig:
    out_dir: str = "run"
    seed: int = 0
    data: DataSection = DataSection()
    train: TrainSection = TrainSection()
    attack: AttackConfig = field(default_factory=AttackConfig)
    defense: DefenseConfig = DefenseConfig()
    paths: PathsSection = PathsSection()
    classifiers: Tuple[str, ...] = ARCH_TAGS
    surrogates: Tuple[str, ...] = ("A",)
    attacks: Tuple[str, ...] = ("cosa",)
    ablation_modes: Tuple[str, ...] = ABLATION_MODES
    defenses: Tuple[str, ...] = ("srs", "sor")
    eps: Tuple[float, ...] = (0.18,)
    pgd_steps: int = 50
    inputs_per_class: Optional[int] = None
    version: int = RUN_CONFIG_VERSION

    def __post_init__(self):
        def closed(name, values, allowed):
            bad = [v for v in values if v not in allowed]
            if bad:
                raise ConfigError(f"{name}: {bad} not in {list(allowed)}")
        closed("classifiers", self.classifiers, ARCH_TAGS)
        closed("surrogates", self.surrogates, self.classifiers)
        closed("attacks", self.attacks, ATTACKS)
        closed("ablation_modes", self.ablation_modes, ABLATION_MODES)
        closed("defenses", self.defenses, DEFENSES)
        closed("train.clf_epochs", list(self.train.clf_epochs), ARCH_TAGS)
        if not self.eps or any(not e > 0 for e in self.eps):
            raise ConfigError("eps must be a non-empty list of positive values")
        if self.inputs_per_class is not None and self.inputs_per_class < 1:
            raise ConfigError("inputs_per_class must be positive")
        if self.version != RUN_CONFIG_VERSION:
            raise ConfigError(f"unsupported run config version {self.version}")

    def as_dict(self):
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def with_overrides(self, seed=None, out_dir=None):
        changes = {}
        if seed is not None:
            changes["seed"] = int(seed)
        if out_dir is not None:
            changes["out_dir"] = str(out_dir)
        return dataclasses.replace(self, **changes)


_SECTIONS = {"data": DataSection, "train": TrainSection, "attack": AttackConfig,
             "defense": DefenseConfig, "paths": PathsSection}


def _strict(cls, doc, where):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {unknown}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def run_config_from_dict(doc) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a JSON object")
    if "version" not in doc:
        raise ConfigError("run config has no 'version' field")
    doc = dict(doc)
    for key, cls in _SECTIONS.items():
        if key in doc:
            doc[key] = _strict(cls, doc[key], key)
    for key in ("classifiers", "surrogates", "attacks", "ablation_modes", "defenses", "eps"):
        if key in doc:
            if not isinstance(doc[key], list):
                raise ConfigError(f"{key}: expected a list")
            doc[key] = tuple(doc[key])
    return _strict(RunConfig, doc, "run config")


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    try:
        cfg = run_config_from_dict(doc)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for name, p in _explicit_paths(cfg):
        if not Path(p).is_file():
            raise ConfigError(f"{path}: paths.{name} refers to missing file {p}")
    return cfg


def _explicit_paths(cfg: RunConfig):
    for name in ("manifest", "autoencoder", "dictionary"):
        p = getattr(cfg.paths, name)
        if p is not None:
            yield name, p
    for arch, p in cfg.paths.classifiers.items():
        yield f"classifiers.{arch}", p


# --- layout, seeds and stamps -----------------------------------------------

def _fmt_eps(eps: float) -> str:
    return f"{eps:g}"


def attack_tag(attack: str, surrogate: str, eps: float) -> str:
    return f"{attack}_{surrogate}_eps{_fmt_eps(eps)}"


class Workspace:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = Path(cfg.out_dir)

    def _pick(self, override, default):
        return Path(override) if override is not None else self.root / default

    @property
    def manifest(self):
        return self._pick(self.cfg.paths.manifest, "data/manifest.json")

    @property
    def autoencoder(self):
        return self._pick(self.cfg.paths.autoencoder, "models/ae.json")

    @property
    def dictionary(self):
        return self._pick(self.cfg.paths.dictionary, "models/dict.json")

    def classifier(self, arch):
        return self._pick(self.cfg.paths.classifiers.get(arch), f"models/clf_{arch}.json")

    def attack_dir(self, tag):
        return self.root / "attacks" / tag

    def defended_dir(self, defense, tag):
        return self.root / "defended" / defense / tag

    def eval_file(self, tag):
        return self.root / "eval" / f"{tag}.json"

    @property
    def reports(self):
        return self.root / "reports"

    @property
    def prototypes(self):
        return self.root / "prototypes"

    def stamp(self, name):
        return self.root / "stamps" / f"{name}.json"

    def timing(self, stage):
        return self.root / "logs" / f"{stage}.json"

    def summary(self, command):
        return self.root / "summaries" / f"{command}.json"

    def require(self, path: Path, producer: str) -> Path:
        if not path.is_file():
            raise StageError(f"missing {path}; run '{producer}' first")
        return path


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _digest(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p if isinstance(p, bytes) else _canonical(p).encode())
        h.update(b"\0")
    return h.hexdigest()


def _file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _fresh(ws: Workspace, name: str, key: str, outputs: Sequence[Path]) -> bool:
    st = ws.stamp(name)
    if not st.is_file() or not all(Path(o).exists() for o in outputs):
        return False
    return json.loads(st.read_text())["key"] == key


def _write_stamp(ws: Workspace, name: str, key: str):
    _write_json(ws.stamp(name), {"key": key})


def _write_json(path: Path, doc):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def component_seed(master: int, *parts: int) -> int:
    """Child seed hashed from the master seed and integer identifiers."""
    ss = np.random.SeedSequence([int(master), *map(int, parts)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


_SEED_TAGS = {"ae": 1, "clf": 2, "dict": 3, "attack": 4, "defense": 5}


# --- pipeline stages --------------------------------------------------------

def run_gen_data(cfg: RunConfig) -> dict:
    ws = Workspace(cfg)
    d = cfg.data
    key = _digest("gen-data", dataclasses.asdict(d), cfg.seed)
    if not _fresh(ws, "gen-data", key, [ws.manifest]):
        if cfg.paths.manifest is not None:
            raise StageError("gen-data writes the default layout; remove paths.manifest to use it")
        make_dataset(DatasetConfig(str(ws.manifest.parent), d.n_train, d.n_test, d.n, d.jitter,
                                   cfg.seed, d.num_classes))
        _write_stamp(ws, "gen-data", key)
    man = load_manifest(ws.manifest)
    return {"train": len(man.train), "test": len(man.test), "classes": man.Z, "n": man.n,
            "manifest_sha256": _file_digest(ws.manifest)}


def _hyper(cfg: RunConfig, epochs: int) -> TrainHyper:
    t = cfg.train
    return TrainHyper(epochs=epochs, lr=t.lr, d=t.d, h=t.h, k=t.k)


def run_train_ae(cfg: RunConfig) -> dict:
    ws = Workspace(cfg)
    man_path = ws.require(ws.manifest, "gen-data")
    hyper = _hyper(cfg, cfg.train.ae_epochs)
    key = _digest("train-ae", dataclasses.asdict(hyper), cfg.seed, _file_digest(man_path))
    report_path = ws.root / "models" / "ae_report.json"
    if not _fresh(ws, "train-ae", key, [ws.autoencoder, report_path]):
        t0 = time.perf_counter()
        enc, dec, rep = train_autoencoder(load_manifest(man_path), hyper,
                                          seed=component_seed(cfg.seed, _SEED_TAGS["ae"]))
        _write_json(ws.timing("train-ae"), {"seconds": time.perf_counter() - t0})
        save_autoencoder(ws.autoencoder, enc, dec)
        _write_json(report_path, {"heldout_cd": rep.metric, "final_loss": rep.final_loss,
                                  "epochs": rep.epochs})
        _write_stamp(ws, "train-ae", key)
    return json.loads(report_path.read_text())


def run_train_clf(cfg: RunConfig, archs: Optional[Sequence[str]] = None) -> dict:
    ws = Workspace(cfg)
    man_path = ws.require(ws.manifest, "gen-data")
    out = {}
    for arch in archs or cfg.classifiers:
        if arch not in ARCH_TAGS:
            raise ConfigError(f"unknown classifier architecture {arch!r}")
        epochs = cfg.train.clf_epochs.get(arch, TrainHyper().epochs)
        hyper = _hyper(cfg, epochs)
        key = _digest("train-clf", arch, dataclasses.asdict(hyper), cfg.seed, _file_digest(man_path))
        path = ws.classifier(arch)
        report_path = path.with_name(f"clf_{arch}_report.json")
        if not _fresh(ws, f"train-clf-{arch}", key, [path, report_path]):
            seed = component_seed(cfg.seed, _SEED_TAGS["clf"], ARCH_TAGS.index(arch))
            t0 = time.perf_counter()
            model, rep = train_classifier(arch, load_manifest(man_path), hyper, seed=seed)
            _write_json(ws.timing(f"train-clf-{arch}"), {"seconds": time.perf_counter() - t0})
            save_model(path, model)
            _write_json(report_path, {"test_accuracy": rep.metric, "final_loss": rep.final_loss,
                                      "epochs": rep.epochs})
            _write_stamp(ws, f"train-clf-{arch}", key)
        out[arch] = json.loads(report_path.read_text())
    return out


def run_build_dict(cfg: RunConfig) -> dict:
    ws = Workspace(cfg)
    man_path = ws.require(ws.manifest, "gen-data")
    ae_path = ws.require(ws.autoencoder, "train-ae")
    key = _digest("build-dict", cfg.attack.m_y, cfg.seed, _file_digest(man_path), _file_digest(ae_path))
    if not _fresh(ws, "build-dict", key, [ws.dictionary]):
        enc, _ = load_autoencoder(ae_path)
        dicts = build_dictionaries(enc, load_manifest(man_path), cfg.attack.m_y,
                                   seed=component_seed(cfg.seed, _SEED_TAGS["dict"]))
        save_dictionaries(ws.dictionary, dicts)
        _write_stamp(ws, "build-dict", key)
    dicts = load_dictionaries(ws.dictionary)
    return {"classes": len(dicts), "m_y": cfg.attack.m_y,
            "condition": {str(y): d.condition() for y, d in sorted(dicts.items())}}


def select_inputs(cfg: RunConfig, manifest):
    """Test entries selected for attack, in manifest order."""
    taken: Dict[int, int] = {}
    chosen = []
    for idx, e in enumerate(manifest.test):
        if cfg.inputs_per_class is not None and taken.get(e.label, 0) >= cfg.inputs_per_class:
            continue
        taken[e.label] = taken.get(e.label, 0) + 1
        chosen.append((idx, e))
    return chosen


def _stem(entry) -> str:
    return Path(entry.path).stem


def _attack_one(kind, P, surrogate, ae, dicts, cfg: AttackConfig, eps, pgd_steps):
    if kind == "pgd":
        return pgd_baseline(P, P.label, surrogate, eps=eps, steps=pgd_steps)
    return ablation_attack(kind, P, P.label, surrogate, ae, dicts[P.label],
                           dataclasses.replace(cfg, eps=eps))


def run_attacks(cfg: RunConfig, kinds: Sequence[str]) -> dict:
    """Attack every selected test input for each (kind, surrogate, eps).

    ``kinds`` are ablation modes or ``pgd``.  Per-input failures are recorded
    in the result file instead of aborting the run.
    """
    ws = Workspace(cfg)
    man_path = ws.require(ws.manifest, "gen-data")
    ae_path = ws.require(ws.autoencoder, "train-ae")
    dict_path = ws.require(ws.dictionary, "build-dict")
    manifest = load_manifest(man_path)
    inputs = select_inputs(cfg, manifest)
    ae = load_autoencoder(ae_path)
    dicts = load_dictionaries(dict_path)
    summary = {}
    for surrogate_arch in cfg.surrogates:
        clf_path = ws.require(ws.classifier(surrogate_arch), "train-clf")
        surrogate = load_model(clf_path, "classifier")
        upstream = [_file_digest(p) for p in (man_path, ae_path, dict_path, clf_path)]
        for kind in kinds:
            for eps in cfg.eps:
                tag = attack_tag(kind, surrogate_arch, eps)
                summary[tag] = _attack_cell(ws, tag, kind, inputs, manifest, surrogate, ae, dicts,
                                            cfg, eps, upstream)
    return summary


def _attack_cell(ws, tag, kind, inputs, manifest, surrogate, ae, dicts, cfg, eps, upstream):
    out_dir = ws.attack_dir(tag)
    cell_cfg = cfg.attack.as_dict() if kind != "pgd" else {"steps": cfg.pgd_steps}
    key = _digest("attack", tag, cell_cfg, cfg.seed, upstream, [e.path for _, e in inputs])
    outputs = [out_dir / f"{_stem(e)}.json" for _, e in inputs]
    if not _fresh(ws, f"attack-{tag}", key, outputs):
        t0 = time.perf_counter()
        for idx, entry in inputs:
            seed = component_seed(cfg.seed, _SEED_TAGS["attack"], cfg.attack.seed, entry.label, idx)
            attack_cfg = dataclasses.replace(cfg.attack, seed=seed % 2**32)
            P = PointCloud(read_cloud(manifest.resolve(entry)).points, entry.label)
            doc = {"input": entry.path, "label": entry.label, "attack": kind, "eps": eps,
                   "surrogate": surrogate.arch, "seed": attack_cfg.seed}
            try:
                res = _attack_one(kind, P, surrogate, ae, dicts, attack_cfg, eps, cfg.pgd_steps)
            except (AttackError, SparseCodingError) as exc:
                log.warning("%s %s failed: %s", tag, entry.path, exc)
                doc.update(success=None, error=str(exc))
            else:
                write_cloud(out_dir / f"{_stem(entry)}.xyz", res.adv)
                doc.update(success=bool(res.success), distortion=res.distortion.as_dict(),
                           pre_clip_linf=res.pre_clip_linf, final_loss=(
                               float(res.loss_trace[-1]) if len(res.loss_trace) else None))
                if res.snapshots:
                    doc["snapshots"] = [_jsonable(s) for s in res.snapshots]
            _write_json(out_dir / f"{_stem(entry)}.json", doc)
        _write_json(ws.timing(f"attack-{tag}"), {"seconds": time.perf_counter() - t0, "inputs": len(inputs)})
        _write_stamp(ws, f"attack-{tag}", key)
    docs = [json.loads(p.read_text()) for p in outputs]
    done = [d for d in docs if d.get("success") is not None]
    return {"inputs": len(docs), "failures": len(docs) - len(done),
            "whitebox_success": sum(d["success"] for d in done)}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def configured_tags(cfg: RunConfig, include_ablation=True) -> List[Tuple[str, str, str, float]]:
    """(tag, attack kind, surrogate, eps) for every attack the config asks for."""
    kinds = ["full" if a == "cosa" else a for a in cfg.attacks]
    if include_ablation:
        kinds += [m for m in cfg.ablation_modes if m not in kinds]
    return [(attack_tag(k, s, e), k, s, e) for s in cfg.surrogates for k in kinds for e in cfg.eps]


def existing_tags(cfg: RunConfig):
    ws = Workspace(cfg)
    return [t for t in configured_tags(cfg) if ws.attack_dir(t[0]).is_dir()]


def _load_adversarial(ws, tag, inputs, manifest):
    pairs = []
    for idx, entry in inputs:
        doc = json.loads(ws.require(ws.attack_dir(tag) / f"{_stem(entry)}.json", "attack").read_text())
        clean = PointCloud(read_cloud(manifest.resolve(entry)).points, entry.label)
        adv = None
        if doc.get("success") is not None:
            adv = PointCloud(read_cloud(ws.attack_dir(tag) / f"{_stem(entry)}.xyz").points, entry.label)
        pairs.append((idx, entry, clean, adv))
    return pairs


def defend_cloud(cfg: RunConfig, defense: str, cloud: PointCloud, label: int, idx: int) -> PointCloud:
    seed = component_seed(cfg.seed, _SEED_TAGS["defense"], cfg.defense.seed, label, idx)
    return apply_defense(defense, cloud, cfg.defense, seed=seed % 2**32)


def run_defend(cfg: RunConfig) -> dict:
    """Write purified copies of every adversarial cloud for each configured defense."""
    ws = Workspace(cfg)
    manifest = load_manifest(ws.require(ws.manifest, "gen-data"))
    inputs = select_inputs(cfg, manifest)
    counts = {}
    for tag, *_ in existing_tags(cfg):
        for defense in cfg.defenses:
            out_dir = ws.defended_dir(defense, tag)
            kept = []
            for idx, entry, _, adv in _load_adversarial(ws, tag, inputs, manifest):
                if adv is None:
                    continue
                d = defend_cloud(cfg, defense, adv, entry.label, idx)
                write_cloud(out_dir / f"{_stem(entry)}.xyz", d)
                kept.append(d.n)
            counts[f"{defense}/{tag}"] = {"clouds": len(kept),
                                          "mean_points": float(np.mean(kept)) if kept else None}
    return counts


def run_eval(cfg: RunConfig) -> dict:
    """Predictions of every configured classifier on clean, adversarial and defended clouds."""
    ws = Workspace(cfg)
    manifest = load_manifest(ws.require(ws.manifest, "gen-data"))
    inputs = select_inputs(cfg, manifest)
    models = {a: load_model(ws.require(ws.classifier(a), "train-clf"), "classifier")
              for a in cfg.classifiers}
    defenses = ("none",) + tuple(d for d in cfg.defenses if d != "none")
    tags = existing_tags(cfg)
    if not tags:
        raise StageError("no attack results found; run 'attack' or 'ablate' first")
    for tag, *_ in tags:
        records = []
        for idx, entry, clean, adv in _load_adversarial(ws, tag, inputs, manifest):
            rec = {"input": entry.path, "label": entry.label, "clean": {}, "clean_defended": {},
                   "adv": None}
            for arch, m in models.items():
                rec["clean"][arch] = int(m.predict(clean.points))
            for defense in defenses[1:]:
                dc = defend_cloud(cfg, defense, clean, entry.label, idx)
                rec["clean_defended"][defense] = {a: int(m.predict(dc.points)) for a, m in models.items()}
            if adv is not None:
                rec["adv"] = {}
                for defense in defenses:
                    da = defend_cloud(cfg, defense, adv, entry.label, idx)
                    rec["adv"][defense] = {a: int(m.predict(da.points)) for a, m in models.items()}
            records.append(rec)
        _write_json(ws.eval_file(tag), {"tag": tag, "records": records})
    return {"evaluated": [t[0] for t in tags]}


# --- ASR and tables ---------------------------------------------------------

def asr_from_predictions(labels, clean_pred, adv_pred) -> Tuple[float, int]:
    """ASR percentage over clean-correct inputs and the size of that eligible set."""
    labels, clean_pred, adv_pred = map(np.asarray, (labels, clean_pred, adv_pred))
    eligible = clean_pred == labels
    n = int(eligible.sum())
    if n == 0:
        raise ValueError("no input is classified correctly in clean form; ASR is undefined")
    return 100.0 * float((adv_pred[eligible] != labels[eligible]).sum()) / n, n


def evaluate_asr(adv_set, model) -> float:
    """ASR of ``(clean, adversarial)`` cloud pairs on ``model``; labels come from the clean clouds."""
    pairs = list(adv_set)
    if not pairs:
        raise ValueError("empty adversarial set")
    labels = [c.label for c, _ in pairs]
    clean = [int(model.predict(c.points)) for c, _ in pairs]
    adv = [int(model.predict(a.points)) for _, a in pairs]
    return asr_from_predictions(labels, clean, adv)[0]


@dataclass(frozen=True)
class TransferCell:
    source: str
    target: str
    attack: str
    eps: float
    asr: Optional[float]
    n: int
    whitebox: bool
    defense: str = "none"
    failures: int = 0

    def row(self):
        return [self.source, self.target, self.attack, _fmt_eps(self.eps), self.defense,
                "" if self.asr is None else f"{self.asr:.4f}", self.n, int(self.whitebox), self.failures]


CELL_HEADER = ["source", "target", "attack", "eps", "defense", "asr", "n", "whitebox", "failures"]


def cells_from_eval(doc, kind, source, eps, targets, defense="none") -> List[TransferCell]:
    cells = []
    for target in targets:
        usable = [r for r in doc["records"] if r["adv"] is not None]
        failures = len(doc["records"]) - len(usable)
        try:
            asr, n = asr_from_predictions([r["label"] for r in usable],
                                          [r["clean"][target] for r in usable],
                                          [r["adv"][defense][target] for r in usable])
        except ValueError:
            asr, n = None, 0
        cells.append(TransferCell(source, target, kind, eps, asr, n, source == target, defense, failures))
    return cells


def _load_eval(ws, tag):
    return json.loads(ws.require(ws.eval_file(tag), "eval").read_text())


def _table(cfg: RunConfig, kinds, defense="none"):
    ws = Workspace(cfg)
    cells = []
    for tag, kind, source, eps in configured_tags(cfg):
        if kind in kinds:
            cells += cells_from_eval(_load_eval(ws, tag), kind, source, eps, cfg.classifiers, defense)
    return cells


def _main_kinds(cfg):
    return ["full" if a == "cosa" else a for a in cfg.attacks]


def transfer_matrix(cfg: RunConfig, run_missing=True) -> List[TransferCell]:
    """Source x target ASR grid for each configured attack and eps."""
    if len(cfg.classifiers) < 2:
        raise ConfigError("a transfer matrix needs at least two classifiers")
    if run_missing:
        run_attacks(cfg, _main_kinds(cfg))
        run_eval(cfg)
    return _table(cfg, _main_kinds(cfg))


def defended_matrix(cfg: RunConfig, defense: str, run_missing=True) -> List[TransferCell]:
    if defense not in DEFENSES:
        raise ConfigError(f"unknown defense {defense!r}")
    if defense not in cfg.defenses and defense != "none":
        cfg = dataclasses.replace(cfg, defenses=cfg.defenses + (defense,))
    if run_missing:
        run_attacks(cfg, _main_kinds(cfg))
        run_eval(cfg)
    return _table(cfg, _main_kinds(cfg), defense)


def ablation_table(cfg: RunConfig) -> List[TransferCell]:
    return _table(cfg, cfg.ablation_modes)


def imperceptibility_report(pairs) -> dict:
    """Mean CD, HD and l2 over ``(clean, adversarial)`` pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("empty set")
    reps = [distortion_report(c, a) for c, a in pairs]
    return {"cd": float(np.mean([r.cd for r in reps])), "hd": float(np.mean([r.hd for r in reps])),
            "l2": float(np.mean([r.l2 for r in reps])), "n": len(reps)}


def export_prototypes(dicts, decoder, out_dir) -> List[Path]:
    out_dir = Path(out_dir)
    paths = []
    for y, dic in sorted(dicts.items()):
        for j in range(dic.m):
            path = out_dir / f"{y}_{j}.xyz"
            write_cloud(path, PointCloud(decoder(dic.D[:, j]), y))
            paths.append(path)
    return paths


def run_export_prototypes(cfg: RunConfig) -> dict:
    ws = Workspace(cfg)
    _, dec = load_autoencoder(ws.require(ws.autoencoder, "train-ae"))
    dicts = load_dictionaries(ws.require(ws.dictionary, "build-dict"))
    paths = export_prototypes(dicts, dec, ws.prototypes)
    return {"files": len(paths)}


# --- reports ----------------------------------------------------------------

def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _markdown(title, header, rows, note) -> str:
    lines = [f"# {title}", ""] + ([note, ""] if note else []) + [
             "| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(str(c) for c in r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def _emit(ws: Workspace, stem, title, header, rows, written, note=ELIGIBLE_NOTE):
    ws.reports.mkdir(parents=True, exist_ok=True)
    (ws.reports / f"{stem}.csv").write_text(_csv(header, rows), encoding="utf-8")
    (ws.reports / f"{stem}.md").write_text(_markdown(title, header, rows, note), encoding="utf-8")
    written += [f"{stem}.csv", f"{stem}.md"]


def write_reports(cfg: RunConfig) -> dict:
    """Rebuild every report from the result and eval files on disk."""
    ws = Workspace(cfg)
    manifest = load_manifest(ws.require(ws.manifest, "gen-data"))
    inputs = select_inputs(cfg, manifest)
    present = {t[0] for t in existing_tags(cfg)}
    if not present:
        raise StageError("no attack results found; run 'attack' or 'ablate' first")
    tags = [t for t in configured_tags(cfg) if t[0] in present]
    written: List[str] = []
    main = set(_main_kinds(cfg))
    for eps in cfg.eps:
        cells = []
        for tag, kind, source, e in tags:
            if kind in main and e == eps:
                cells += cells_from_eval(_load_eval(ws, tag), kind, source, e, cfg.classifiers)
        if cells:
            _emit(ws, f"transfer_eps{_fmt_eps(eps)}", f"Transfer ASR (%), eps={_fmt_eps(eps)}",
                  CELL_HEADER, [c.row() for c in cells], written)
        for defense in cfg.defenses:
            cells = []
            for tag, kind, source, e in tags:
                if e == eps:
                    cells += cells_from_eval(_load_eval(ws, tag), kind, source, e, cfg.classifiers, defense)
            if cells:
                _emit(ws, f"defended_{defense}_eps{_fmt_eps(eps)}",
                      f"ASR (%) under {defense}, eps={_fmt_eps(eps)}", CELL_HEADER,
                      [c.row() for c in cells], written)
    ab = [c for tag, kind, source, e in tags if kind in cfg.ablation_modes
          for c in cells_from_eval(_load_eval(ws, tag), kind, source, e, cfg.classifiers)]
    if ab:
        _emit(ws, "ablation", "Ablation ASR (%)", CELL_HEADER, [c.row() for c in ab], written)
    rows = []
    for tag, kind, source, eps in tags:
        pairs = [(c, a) for _, _, c, a in _load_adversarial(ws, tag, inputs, manifest) if a is not None]
        if pairs:
            rep = imperceptibility_report(pairs)
            rows.append([kind, source, _fmt_eps(eps), f"{rep['cd']:.6g}", f"{rep['hd']:.6g}",
                         f"{rep['l2']:.6g}", rep["n"]])
    _emit(ws, "imperceptibility", "Mean distortion of adversarial clouds",
          ["attack", "source", "eps", "cd", "hd", "l2", "n"], rows, written, note=None)
    return {"files": written}


def mean_asr(cells: Sequence[TransferCell]) -> float:
    vals = [c.asr for c in cells if c.asr is not None]
    return float(np.mean(vals)) if vals else math.nan
