"""Pipeline orchestration: generate, label, train, fuse, evaluate, report.

One configuration file drives every stage; a single root seed derives all
stage seeds, so identical configs reproduce identical artifacts byte for
byte. Each stage records its output files and content hashes in a run
manifest, and ``--resume`` reuses finished artifacts instead of recomputing
them.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 runtime error.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import click
import yaml

from . import __version__, corpus, fusion, labeler, report, sasrec, segments, sknn, syngen
from .errors import (
    CheckpointError,
    ConfigInvalid,
    MalformedRow,
    NewsfuseError,
    UnresolvableArticle,
)
from .evaluation import enumerate_events, evaluate, compare_report
from .util import derive_seed, sha256_file

EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3

MAIN_TABLE_ORDER = [
    "SKNN (Global)",
    "SASRec (Global)",
    "SKNN + Ensemble Fusion",
    "SKNN + NN Fusion",
    "SASRec + Ensemble Fusion",
    "SASRec + NN Fusion",
]


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: Path = Path("run")
    dataset: dict = field(default_factory=lambda: {"kind": "synthetic"})
    split_ratios: tuple[float, float, float] = corpus.DEFAULT_SPLIT_RATIOS
    session_gap_seconds: float = corpus.DEFAULT_SESSION_GAP_SECONDS
    segmentation_style: str = "per_category_plus_pooled"
    include_global_segment: bool = False
    sparse_floor: int = segments.SPARSE_FLOOR
    bases: tuple[str, ...] = ("sasrec", "sknn")
    sasrec_params: dict = field(default_factory=dict)
    sknn_params: dict = field(default_factory=dict)
    fusion_params: dict = field(default_factory=dict)
    eval_ks: tuple[int, ...] = (10, 20, 50)
    eval_positions: str = "all"
    eval_variants: tuple[str, ...] | None = None
    include_locality_baselines: bool = True
    labeler_params: dict = field(default_factory=dict)

    @staticmethod
    def load(path: str | Path, seed: int | None = None,
             out_dir: str | None = None) -> "ExperimentConfig":
        try:
            raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except FileNotFoundError:
            raise ConfigInvalid(f"config file not found: {path}") from None
        except yaml.YAMLError as exc:
            raise ConfigInvalid(f"cannot parse config {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigInvalid("config root must be a mapping")

        split = raw.get("split", {})
        seg = raw.get("segmentation", {})
        ev = raw.get("evaluation", {})
        cfg = ExperimentConfig(
            seed=int(raw.get("seed", 0)),
            out_dir=Path(raw.get("out_dir", "run")),
            dataset=raw.get("dataset", {"kind": "synthetic"}),
            split_ratios=tuple(split.get("ratios", corpus.DEFAULT_SPLIT_RATIOS)),
            session_gap_seconds=float(
                split.get("session_gap_seconds", corpus.DEFAULT_SESSION_GAP_SECONDS)
            ),
            segmentation_style=seg.get("style", "per_category_plus_pooled"),
            include_global_segment=bool(seg.get("include_global", False)),
            sparse_floor=int(seg.get("sparse_floor", segments.SPARSE_FLOOR)),
            bases=tuple(raw.get("bases", ["sasrec", "sknn"])),
            sasrec_params=raw.get("sasrec", {}),
            sknn_params=raw.get("sknn", {}),
            fusion_params=raw.get("fusion", {}),
            eval_ks=tuple(int(k) for k in ev.get("ks", (10, 20, 50))),
            eval_positions=ev.get("positions", "all"),
            eval_variants=tuple(ev["variants"]) if ev.get("variants") else None,
            include_locality_baselines=bool(ev.get("include_locality_baselines", True)),
            labeler_params=raw.get("labeler", {}),
        )
        if seed is not None:
            cfg.seed = seed
        if out_dir is not None:
            cfg.out_dir = Path(out_dir)
        for base in cfg.bases:
            if base not in ("sasrec", "sknn"):
                raise ConfigInvalid(f"unknown base model {base!r}")
        if len(cfg.split_ratios) != 3:
            raise ConfigInvalid("split.ratios must have 3 entries")
        return cfg

    def echo(self) -> dict:
        d = dataclasses.asdict(self)
        d["out_dir"] = str(self.out_dir)
        return d

    # derived paths
    @property
    def data_dir(self) -> Path:
        return self.out_dir / "data"

    @property
    def models_dir(self) -> Path:
        return self.out_dir / "models"

    @property
    def fusion_dir(self) -> Path:
        return self.out_dir / "fusion"

    @property
    def reports_dir(self) -> Path:
        return self.out_dir / "reports"

    def sasrec_config(self, role: str) -> sasrec.SasrecConfig:
        params = dict(self.sasrec_params)
        if "adam_betas" in params:
            params["adam_betas"] = tuple(params["adam_betas"])
        params["seed"] = derive_seed(self.seed, "sasrec", role) % (2 ** 31)
        return sasrec.SasrecConfig(**params)

    def sknn_config(self) -> sknn.SknnConfig:
        return sknn.SknnConfig(**self.sknn_params)

    def fusion_config(self, role: str) -> fusion.FusionConfig:
        params = dict(self.fusion_params)
        if "adam_betas" in params:
            params["adam_betas"] = tuple(params["adam_betas"])
        params["seed"] = derive_seed(self.seed, "fusion", role) % (2 ** 31)
        return fusion.FusionConfig(**params)

    def labeler_config(self) -> labeler.LabelerConfig:
        return labeler.LabelerConfig(**self.labeler_params)


# --- manifest ----------------------------------------------------------------

def _manifest_path(cfg: ExperimentConfig) -> Path:
    return cfg.out_dir / "manifest.json"


def _load_manifest(cfg: ExperimentConfig) -> dict:
    path = _manifest_path(cfg)
    if path.exists():
        return json.loads(path.read_text(encoding="utf-8"))
    return {"tool_version": __version__, "seed": cfg.seed,
            "config_echo": cfg.echo(), "stages": {}}


def _record_stage(cfg: ExperimentConfig, stage: str, files: Sequence[Path]) -> None:
    manifest = _load_manifest(cfg)
    manifest["tool_version"] = __version__
    manifest["seed"] = cfg.seed
    manifest["config_echo"] = cfg.echo()
    manifest["stages"][stage] = {
        "files": {str(p.relative_to(cfg.out_dir)): sha256_file(p)
                  for p in files if p.is_file()}
    }
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    _manifest_path(cfg).write_text(
        json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8"
    )


# --- dataset loading ---------------------------------------------------------

def _dataset_paths(cfg: ExperimentConfig) -> tuple[Path, Path, str]:
    kind = cfg.dataset.get("kind", "synthetic")
    if kind == "synthetic":
        return cfg.data_dir / "articles.csv", cfg.data_dir / "interactions.csv", "syracuse_csv"
    if kind == "ingest":
        articles = Path(cfg.dataset["articles"])
        labeled = cfg.data_dir / "articles_labeled.csv"
        if labeled.exists():
            articles = labeled  # labeling stage output supersedes the raw file
        fmt = cfg.dataset.get("articles_format", "syracuse_csv")
        if articles == labeled:
            fmt = "syracuse_csv"  # labeled output always carries the locality column
        return articles, Path(cfg.dataset["interactions"]), fmt
    raise ConfigInvalid(f"unknown dataset kind {kind!r}")


def _load_corpus(cfg: ExperimentConfig) -> tuple[corpus.Catalog, list[corpus.Session]]:
    articles_path, interactions_path, fmt = _dataset_paths(cfg)
    for p, stage in ((articles_path, "generate/label"), (interactions_path, "generate")):
        if not Path(p).exists():
            raise FileNotFoundError(f"missing {p}; run the {stage} stage first")
    catalog = corpus.parse_articles(articles_path, format=fmt)
    interactions = corpus.parse_interactions(interactions_path)
    corpus.resolve_against(interactions, catalog)
    sessions = corpus.sessionize(interactions, gap=cfg.session_gap_seconds)
    return catalog, sessions


def _split(cfg: ExperimentConfig, sessions: Sequence[corpus.Session]) -> corpus.SplitBundle:
    return corpus.chronological_split(sessions, tuple(cfg.split_ratios))


# --- stage implementations ---------------------------------------------------

def run_generate(cfg: ExperimentConfig) -> list[Path]:
    params = dict(cfg.dataset.get("generator", {}))
    params.setdefault("seed", derive_seed(cfg.seed, "generate") % (2 ** 31))
    gen_cfg = syngen.GeneratorConfig.from_mapping(params)
    dataset = syngen.generate(gen_cfg)
    paths = syngen.write_dataset(dataset, cfg.data_dir)
    check = syngen.validate_proportions(dataset, gen_cfg, tolerance=0.02)
    prop_path = cfg.data_dir / "proportions.csv"
    with open(prop_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["category", "locality", "target", "empirical", "abs_diff"])
        for (cat, loc), (target, emp, diff) in check.per_cell.items():
            w.writerow([cat, loc, f"{target:.6f}", f"{emp:.6f}", f"{diff:.6f}"])
    files = [*paths.values(), prop_path]
    _record_stage(cfg, "generate", files)
    return files


def run_label(cfg: ExperimentConfig, resume: bool) -> tuple[list[Path], int]:
    texts_path = cfg.dataset.get("texts")
    if not texts_path:
        raise ConfigInvalid("dataset.texts is required for the label stage")
    articles = labeler.read_article_texts(texts_path)
    lab_cfg = cfg.labeler_config()
    cfg.data_dir.mkdir(parents=True, exist_ok=True)
    progress = cfg.data_dir / "label_progress.csv"
    if not resume and progress.exists():
        progress.unlink()
    result = labeler.label_corpus(articles, lab_cfg, progress_path=progress)

    files = [progress]
    failures_path = cfg.data_dir / "label_failures.csv"
    with open(failures_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["article_id", "error"])
        for article_id, error in result.failures:
            w.writerow([article_id, error])
    files.append(failures_path)

    raw_articles = cfg.dataset.get("articles")
    if raw_articles:
        fmt = cfg.dataset.get("articles_format", "ebnerd_csv")
        catalog = corpus.parse_articles(raw_articles, format=fmt)
        merged = labeler.apply_labels(result.labels, catalog.articles)
        labeled_path = cfg.data_dir / "articles_labeled.csv"
        corpus.write_articles(corpus.Catalog(tuple(merged), catalog.taxonomy), labeled_path)
        files.append(labeled_path)
    _record_stage(cfg, "label", files)
    return files, len(result.failures)


def _baseline_segments() -> dict[str, segments.SegmentSpec]:
    return {
        "global": segments.SegmentSpec(None, segments.LocalityFilter.ALL),
        "local_only": segments.SegmentSpec(None, segments.LocalityFilter.LOCAL),
        "nonlocal_only": segments.SegmentSpec(None, segments.LocalityFilter.NONLOCAL),
    }


def run_train(cfg: ExperimentConfig, resume: bool) -> list[Path]:
    catalog, sessions = _load_corpus(cfg)
    split = _split(cfg, sessions)
    cfg.models_dir.mkdir(parents=True, exist_ok=True)

    hist_path = cfg.out_dir / "reports" / "split_histograms.csv"
    hist_path.parent.mkdir(parents=True, exist_ok=True)
    hists = corpus.split_histograms(split, catalog)
    with open(hist_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "category", "locality", "clicks"])
        for split_name, counts in hists.items():
            for (cat, loc), n in counts.items():
                w.writerow([split_name, cat, loc, n])

    files = [hist_path]
    scheme = segments.build_scheme(catalog, cfg.segmentation_style,
                                   include_global=cfg.include_global_segment)
    for base in cfg.bases:
        # unified baselines: all-data, local-only, non-local-only
        for role, seg in _baseline_segments().items():
            if role == "global":
                train_sessions = list(split.train)
                val_sessions = list(split.validation)
            else:
                train_sessions = segments.filter_interactions(split.train, seg, catalog)
                val_sessions = segments.filter_interactions(split.validation, seg, catalog)
            path = cfg.models_dir / (f"{base}_{role}.sasrec" if base == "sasrec"
                                     else f"{base}_{role}.sknn")
            if resume and path.exists():
                files.append(path)
                continue
            if not train_sessions:
                continue
            if base == "sasrec":
                mcfg = cfg.sasrec_config(role)
                vocab = sorted({a for s in train_sessions for a in s.items})
                model = sasrec.init(mcfg, vocab)
                model, _ = sasrec.train(model, train_sessions, mcfg,
                                        val_sessions=val_sessions or None)
                sasrec.save(model, path)
            else:
                scfg = cfg.sknn_config()
                model = sknn.fit(train_sessions, k=scfg.k, sample_size=scfg.sample_size)
                sknn.save(model, path)
            files.append(path)

        reg_dir = cfg.models_dir / f"registry_{base}"
        if resume and (reg_dir / "registry.json").exists():
            files.append(reg_dir / "registry.json")
            continue
        base_config = cfg.sasrec_config(f"registry-{base}") if base == "sasrec" else cfg.sknn_config()
        registry = segments.train_registry(split, scheme, base, base_config, catalog,
                                           sparse_floor=cfg.sparse_floor)
        manifest_path = segments.save_registry(registry, reg_dir)
        files.append(manifest_path)
    _record_stage(cfg, "train", files)
    return files


def run_fuse(cfg: ExperimentConfig, resume: bool) -> list[Path]:
    catalog, sessions = _load_corpus(cfg)
    split = _split(cfg, sessions)
    cfg.fusion_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for base in cfg.bases:
        out_path = cfg.fusion_dir / f"{base}.fusion"
        if resume and out_path.exists():
            files.append(out_path)
            continue
        reg_dir = cfg.models_dir / f"registry_{base}"
        if not (reg_dir / "registry.json").exists():
            raise FileNotFoundError(f"missing {reg_dir}/registry.json; run the train stage first")
        registry = segments.load_registry(reg_dir)
        fcfg = cfg.fusion_config(base)
        model, _ = fusion.train_fusion(registry, catalog, list(split.train), fcfg,
                                       validation_sessions=list(split.validation))
        fusion.save_fusion(model, out_path)
        files.append(out_path)
    _record_stage(cfg, "fuse", files)
    return files


def _variant_names(cfg: ExperimentConfig) -> list[str]:
    if cfg.eval_variants:
        return list(cfg.eval_variants)
    names = [n for n in MAIN_TABLE_ORDER
             if n.split(" ")[0].lower() in [b.lower() for b in cfg.bases]]
    return names


def _build_recommender(name: str, cfg: ExperimentConfig, catalog: corpus.Catalog):
    base = "sasrec" if name.startswith("SASRec") else "sknn"
    suffix = ".sasrec" if base == "sasrec" else ".sknn"

    def load_model(path: Path):
        if not path.exists():
            raise FileNotFoundError(f"missing checkpoint {path}; run the train stage first")
        return sasrec.load(path) if base == "sasrec" else sknn.load(path)

    if "NN Fusion" in name or "Ensemble Fusion" in name:
        reg_dir = cfg.models_dir / f"registry_{base}"
        if not (reg_dir / "registry.json").exists():
            raise FileNotFoundError(f"missing {reg_dir}/registry.json; run the train stage first")
        registry = segments.load_registry(reg_dir)
        if "Ensemble" in name:
            return fusion.MeanRankRecommender(name, registry, catalog)
        fpath = cfg.fusion_dir / f"{base}.fusion"
        if not fpath.exists():
            raise FileNotFoundError(f"missing {fpath}; run the fuse stage first")
        fmodel = fusion.load_fusion(fpath, registry)
        return fusion.FusionRecommender(name, fmodel, registry, catalog)
    if "Local-Only" in name and "Non-Local-Only" not in name:
        return fusion.SingleModelRecommender(name, load_model(cfg.models_dir / f"{base}_local_only{suffix}"))
    if "Non-Local-Only" in name:
        return fusion.SingleModelRecommender(name, load_model(cfg.models_dir / f"{base}_nonlocal_only{suffix}"))
    return fusion.SingleModelRecommender(name, load_model(cfg.models_dir / f"{base}_global{suffix}"))


def run_evaluate(cfg: ExperimentConfig) -> list[Path]:
    catalog, sessions = _load_corpus(cfg)
    split = _split(cfg, sessions)
    events = enumerate_events(split.test, positions=cfg.eval_positions)
    train_vocab = sorted({a for s in split.train for a in s.items})

    names = _variant_names(cfg)
    extra = []
    if cfg.include_locality_baselines and not cfg.eval_variants:
        for base in cfg.bases:
            label_base = "SASRec" if base == "sasrec" else "SKNN"
            for role, fname in (("Local-Only", "local_only"), ("Non-Local-Only", "nonlocal_only")):
                suffix = ".sasrec" if base == "sasrec" else ".sknn"
                if (cfg.models_dir / f"{base}_{fname}{suffix}").exists():
                    extra.append(f"{label_base} ({role})")

    reports = []
    for name in names + extra:
        rec = _build_recommender(name, cfg, catalog)
        reports.append(evaluate(rec, events, catalog, ks=cfg.eval_ks,
                                train_vocab=train_vocab))

    cfg.reports_dir.mkdir(parents=True, exist_ok=True)
    report_csv = cfg.reports_dir / "report.csv"
    report.write_report_csv(reports, report_csv)
    main_reports = [r for r in reports if r.model_name in names]
    table = compare_report(main_reports)
    comparison_path = cfg.reports_dir / "comparison.txt"
    report.write_comparison(table, comparison_path)
    figures = report.write_figures(reports, cfg.reports_dir)
    files = [report_csv, comparison_path, *figures]
    _record_stage(cfg, "evaluate", files)
    return files


def run_report(cfg: ExperimentConfig) -> list[Path]:
    report_csv = cfg.reports_dir / "report.csv"
    if not report_csv.exists():
        raise FileNotFoundError(f"missing {report_csv}; run the evaluate stage first")
    reports = report.read_report_csv(report_csv)
    names = [n for n in _variant_names(cfg) if any(r.model_name == n for r in reports)]
    main_reports = [r for r in reports if r.model_name in names]
    table = compare_report(main_reports)
    comparison_path = cfg.reports_dir / "comparison.txt"
    report.write_comparison(table, comparison_path)
    figures = report.write_figures(reports, cfg.reports_dir)
    return [comparison_path, *figures]


# --- click wiring -------------------------------------------------------------

def _run_stage(fn, config: str, seed: int | None, out: str | None, **kwargs) -> None:
    try:
        cfg = ExperimentConfig.load(config, seed=seed, out_dir=out)
        fn(cfg, **kwargs)
    except (ConfigInvalid, yaml.YAMLError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except (MalformedRow, UnresolvableArticle, FileNotFoundError, CheckpointError) as exc:
        click.echo(f"data error: {exc}", err=True)
        sys.exit(EXIT_DATA)
    except NewsfuseError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_RUNTIME)


def _stage_options(fn):
    fn = click.option("--config", "config", required=True, type=str,
                      help="experiment configuration file (YAML or JSON)")(fn)
    fn = click.option("--seed", type=int, default=None, help="override the root seed")(fn)
    fn = click.option("--out", type=str, default=None, help="override the output directory")(fn)
    return fn


@click.group(help="Hybrid local/global news recommendation pipeline.")
@click.version_option(__version__)
def main() -> None:
    pass


@main.command(help="Generate the synthetic dataset declared in the config.")
@_stage_options
def generate(config, seed, out):
    _run_stage(lambda cfg: run_generate(cfg), config, seed, out)


@main.command(help="Label article locality through the configured chat endpoint.")
@_stage_options
@click.option("--resume", is_flag=True, help="continue from the progress file")
def label(config, seed, out, resume):
    def stage(cfg):
        _, n_failures = run_label(cfg, resume)
        if n_failures:
            click.echo(f"label: {n_failures} articles failed", err=True)
            sys.exit(EXIT_DATA)

    _run_stage(stage, config, seed, out)


@main.command(help="Train unified baselines and the segment expert registry.")
@_stage_options
@click.option("--resume", is_flag=True, help="reuse checkpoints that already exist")
def train(config, seed, out, resume):
    _run_stage(lambda cfg: run_train(cfg, resume), config, seed, out)


@main.command(help="Train the fusion network over the trained registry.")
@_stage_options
@click.option("--resume", is_flag=True, help="reuse fusion checkpoints that already exist")
def fuse(config, seed, out, resume):
    _run_stage(lambda cfg: run_fuse(cfg, resume), config, seed, out)


@main.command(name="evaluate",
              help="Evaluate all model variants and emit reports plus figures.")
@_stage_options
def evaluate_cmd(config, seed, out):
    _run_stage(lambda cfg: run_evaluate(cfg), config, seed, out)


@main.command(name="report", help="Re-render comparison table and figures from report.csv.")
@_stage_options
def report_cmd(config, seed, out):
    _run_stage(lambda cfg: run_report(cfg), config, seed, out)


if __name__ == "__main__":
    main()
