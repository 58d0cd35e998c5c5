"""
Experiment orchestration for promptpan.

Runs continual scenarios from a sectioned config file, keeps per-step
checkpoints, evaluates after every step and drives the δ sweep, the
class-ordering study and the ablation grid. Every artifact carries the
config hash and build id.
"""

import os
import shutil
import logging
import itertools
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from checkpoint import load_checkpoint, read_manifest, save_checkpoint
from config import dump_sections, load_sections, settings
from data import (DISJOINT, MODES, ClassCatalog, PanopticSample, SceneGenConfig, TaskProtocol, build_protocol,
                  class_histogram, generate_dataset, load_dataset_cache, make_catalog, read_coco_panoptic,
                  save_dataset_cache, step_view, write_coco_panoptic)
from errors import CheckpointMismatchError, ConfigError, FormatError, ProtocolError
from inference import (InferenceConfig, ImageEvidence, panoptic_to_semantic, predict, predict_image,
                       read_sidecars, write_sidecars)
from metrics import (MIOU_CLASS_HEADER, PQ_CLASS_HEADER, group_report, mean_iou, panoptic_quality,
                     per_class_rows, standard_groups)
from model import (SHALLOW, ModelConfig, ModelState, add_step, count_flops, count_trainable,
                   init_model, parameter_checksum)
from plots import DELTA_SWEEP_CSV, emit_plots as draw_plots
from reports import ReportBundle, dict_rows, write_bundle, write_table, Table
from training import LossLog, MatchWeights, TrainHyper, train_task
from utils import build_id, config_hash, configure_torch, seed_everything, timed

logger = logging.getLogger(__name__)

ECLIPSE = 'eclipse'
FINETUNE = 'finetune'
METHODS = (ECLIPSE, FINETUNE)
SYNTHETIC = 'synthetic'
COCO = 'coco'
EVAL_SEED_OFFSET = 1_000_003
GROUP_COLUMNS = ['group', 'classes', 'pq', 'sq', 'rq']


# ─── Config ───────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class DatasetConfig:
    source: str = SYNTHETIC
    train_size: int = 2000
    eval_size: int = 400
    cache_dir: str = ''
    train_annotations: str = ''
    train_images: str = ''
    eval_annotations: str = ''
    eval_images: str = ''

    def validate(self):
        if self.source not in (SYNTHETIC, COCO):
            raise ConfigError(f"dataset.source must be {SYNTHETIC} or {COCO}, got {self.source!r}")
        if self.source == SYNTHETIC and (self.train_size < 1 or self.eval_size < 1):
            raise ConfigError("dataset sizes must be >= 1")
        if self.source == COCO:
            for name in ('train_annotations', 'train_images', 'eval_annotations', 'eval_images'):
                if not getattr(self, name):
                    raise ConfigError(f"dataset.{name} is required for coco data")


@dataclass(frozen=True)
class ProtocolConfig:
    base: int = 12
    increment: int = 4
    mode: str = 'overlap'
    ordering_seed: Optional[int] = None

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"protocol.mode must be one of {MODES}, got {self.mode!r}")
        if self.base < 1 or self.increment < 1:
            raise ConfigError("protocol.base and protocol.increment must be >= 1")


@dataclass(frozen=True)
class ExperimentSection:
    name: str = 'run'
    method: str = ECLIPSE
    seed: int = 0
    output_dir: str = ''
    semantic_eval: bool = False
    eval_every_step: bool = True
    eval_batch_size: int = 16
    workbook: bool = True
    sweep_deltas: Tuple[float, ...] = (0.0, 0.1, 0.3, 0.5, 0.7, 1.0)
    n_orderings: int = 10
    ablate_switches: Tuple[str, ...] = ('shallow', 'no_logit_manipulation')
    ablate_prompt_counts: Tuple[int, ...] = ()

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"experiment.method must be one of {METHODS}, got {self.method!r}")
        if self.eval_batch_size < 1 or self.n_orderings < 1:
            raise ConfigError("eval_batch_size and n_orderings must be >= 1")
        if any(d < 0 for d in self.sweep_deltas):
            raise ConfigError("sweep deltas must be >= 0")
        unknown = set(self.ablate_switches) - set(SWITCHES)
        if unknown:
            raise ConfigError(f"unknown ablation switches {sorted(unknown)}; known: {SWITCHES}")
        if len(self.ablate_prompt_counts) % 2:
            raise ConfigError("ablate_prompt_counts lists (base, step) pairs")


SWITCHES = ('shallow', 'no_logit_manipulation', 'finetune', 'disjoint')

SCHEMA = {
    'scene': SceneGenConfig,
    'dataset': DatasetConfig,
    'protocol': ProtocolConfig,
    'model': ModelConfig,
    'training': TrainHyper,
    'matching': MatchWeights,
    'inference': InferenceConfig,
    'experiment': ExperimentSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    scene: SceneGenConfig = field(default_factory=SceneGenConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainHyper = field(default_factory=TrainHyper)
    matching: MatchWeights = field(default_factory=MatchWeights)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)

    def validate(self):
        for name in SCHEMA:
            getattr(self, name).validate()
        if self.dataset.source == SYNTHETIC:
            if tuple(self.scene.image_size) != tuple(self.model.image_size):
                raise ConfigError(f"scene.image_size {self.scene.image_size} differs from "
                                  f"model.image_size {self.model.image_size}")
            n = self.scene.num_thing_classes + self.scene.num_stuff_classes
            rest = n - self.protocol.base
            if rest < 0 or (rest and rest % self.protocol.increment):
                raise ConfigError(f"protocol {self.protocol.base}-{self.protocol.increment} "
                                  f"does not tile a catalog of {n} classes")
        return self

    @property
    def hash(self) -> str:
        """config_hash over every knob except where the outputs go."""
        return config_hash(replace(self, experiment=replace(self.experiment, output_dir='')))

    @property
    def run_dir(self) -> str:
        if self.experiment.output_dir:
            return self.experiment.output_dir
        return os.path.join(settings.output_root, f"{self.experiment.name}-{self.hash}")

    def sections(self) -> Dict[str, object]:
        return {name: getattr(self, name) for name in SCHEMA}


def load_experiment(path: str) -> ExperimentConfig:
    return ExperimentConfig(**load_sections(path, SCHEMA)).validate()


def with_overrides(cfg: ExperimentConfig, seed: Optional[int] = None, output: Optional[str] = None) -> ExperimentConfig:
    """CLI overrides, applied before hashing: --seed reseeds model and training, --output moves the run."""
    if seed is not None:
        cfg = replace(cfg, experiment=replace(cfg.experiment, seed=seed),
                      training=replace(cfg.training, seed=seed))
    if output is not None:
        cfg = replace(cfg, experiment=replace(cfg.experiment, output_dir=output))
    return cfg.validate()


# ─── Data ─────────────────────────────────────────────────────────────────────

def load_datasets(cfg: ExperimentConfig) -> Tuple[ClassCatalog, List[PanopticSample], List[PanopticSample]]:
    """Catalog plus train and eval sets; synthetic scenes use the native cache when configured."""
    ds = cfg.dataset
    if ds.source == COCO:
        catalog, train = read_coco_panoptic(ds.train_annotations, ds.train_images)
        eval_catalog, evaluation = read_coco_panoptic(ds.eval_annotations, ds.eval_images)
        if eval_catalog != catalog:
            raise FormatError(f"{ds.eval_annotations}: categories differ from {ds.train_annotations}")
        return catalog, train, evaluation

    eval_scene = replace(cfg.scene, seed=cfg.scene.seed + EVAL_SEED_OFFSET)
    parts = []
    for name, scene, size in (('train', cfg.scene, ds.train_size), ('eval', eval_scene, ds.eval_size)):
        key = config_hash({'scene': scene, 'size': size})
        cache = os.path.join(ds.cache_dir, f"{name}-{key}") if ds.cache_dir else ''
        if cache and os.path.exists(os.path.join(cache, 'manifest.json')):
            _, samples = load_dataset_cache(cache, key)
            logger.info(f"Loaded {len(samples)} {name} scenes from cache {cache}")
        else:
            samples = generate_dataset(scene, size)
            if cache:
                save_dataset_cache(cache, make_catalog(scene), samples, scene.seed, key)
        parts.append(samples)
    return make_catalog(cfg.scene), parts[0], parts[1]


def make_protocol(cfg: ExperimentConfig, catalog: ClassCatalog) -> TaskProtocol:
    p = cfg.protocol
    return build_protocol(catalog, p.base, p.increment, p.mode, p.ordering_seed)


@timed("generate-data")
def generate_data(cfg: ExperimentConfig) -> ReportBundle:
    """Materialize the datasets as COCO-panoptic folders plus a class histogram."""
    catalog, train, evaluation = load_datasets(cfg)
    out = os.path.join(cfg.run_dir, 'data')
    bundle = ReportBundle(out, cfg.hash, build_id())
    for name, samples in (('train', train), ('eval', evaluation)):
        annotation = write_coco_panoptic(catalog, samples, os.path.join(out, f"panoptic_{name}.json"),
                                         os.path.join(out, f"{name}_images"))
        bundle.files.append(annotation)
    hist_train, hist_eval = class_histogram(train), class_histogram(evaluation)
    bundle.add_table('class_histogram', ['class_id', 'name', 'is_thing', 'train_segments', 'eval_segments'], [
        [c.class_id, c.name, int(c.is_thing), hist_train.get(c.class_id, 0), hist_eval.get(c.class_id, 0)]
        for c in catalog.classes
    ], title='Class histogram')
    bundle.summary = {'train_images': len(train), 'eval_images': len(evaluation), 'classes': len(catalog)}
    return write_bundle(bundle, workbook=False)


# ─── Evaluation ───────────────────────────────────────────────────────────────

@dataclass
class Evaluation:
    pq: object
    miou: Optional[object]
    evidence: List[ImageEvidence]


def inference_config(cfg: ExperimentConfig) -> InferenceConfig:
    """The fine-tuning baseline keeps the fixed-threshold rule for every head."""
    if cfg.experiment.method == FINETUNE:
        return replace(cfg.inference, logit_manipulation=False)
    return cfg.inference


def score_predictions(predictions, semantic_maps, evaluation: Sequence[PanopticSample], groups) -> Tuple:
    pq = panoptic_quality(predictions, evaluation, groups)
    miou = None
    if semantic_maps and semantic_maps[0] is not None:
        miou = mean_iou(semantic_maps, [panoptic_to_semantic(s) for s in evaluation], groups)
    return pq, miou


@timed("evaluate")
def evaluate_state(cfg: ExperimentConfig, state: ModelState, catalog: ClassCatalog, protocol: TaskProtocol,
                   evaluation: Sequence[PanopticSample], steps: Optional[Sequence[int]] = None) -> Evaluation:
    """Evaluate the heads that exist (or only ``steps``) on the eval set."""
    predictions, semantic_maps, evidence = predict(
        state, evaluation, catalog, inference_config(cfg), steps=steps,
        batch_size=cfg.experiment.eval_batch_size, semantic=cfg.experiment.semantic_eval,
    )
    pq, miou = score_predictions(predictions, semantic_maps, evaluation, standard_groups(protocol, catalog))
    return Evaluation(pq, miou, evidence)


def _group_rows(result, protocol: TaskProtocol, catalog: ClassCatalog) -> List[Dict[str, str]]:
    return group_report(result, protocol, catalog)


def _pq_of(rows: Sequence[Dict[str, str]], group: str) -> str:
    for row in rows:
        if row['group'] == group:
            return row['pq']
    return '-'


# ─── Scenario ─────────────────────────────────────────────────────────────────

def checkpoint_dir(run_dir: str, t: int) -> str:
    return os.path.join(run_dir, 'checkpoints', f"step_{t:02d}")


def latest_checkpoint(run_dir: str) -> Optional[str]:
    root = os.path.join(run_dir, 'checkpoints')
    if not os.path.isdir(root):
        return None
    steps = sorted(d for d in os.listdir(root) if os.path.exists(os.path.join(root, d, 'manifest.json')))
    return os.path.join(root, steps[-1]) if steps else None


def _accounting_row(state: ModelState, t: int) -> list:
    return [t, state.num_prompts(t), sum(state.num_prompts(k) for k in range(1, t + 1)),
            count_trainable(state), count_flops(state, t),
            parameter_checksum(state, ['prompts.1', 'head.1'])[:16]]


ACCOUNTING_COLUMNS = ['step', 'num_prompts', 'total_prompts', 'trainable_params', 'flops', 'step1_checksum']


@timed("run")
def run_scenario(cfg: ExperimentConfig, resume: bool = False) -> ReportBundle:
    """
    Train steps 1..T, checkpoint after each, evaluate after each (when
    enabled) and after the last, then write the group tables.

    With resume the newest checkpoint is loaded first; a checkpoint written
    under another config hash refuses to load.
    """
    configure_torch()
    seed_everything(cfg.experiment.seed)
    run_dir, digest = cfg.run_dir, cfg.hash
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, 'config.ini'), 'w') as f:
        f.write(f"# config_hash {digest}\n" + dump_sections(cfg.sections()))

    catalog, train, evaluation = load_datasets(cfg)
    protocol = make_protocol(cfg, catalog)
    method = cfg.experiment.method
    logger.info(f"Scenario {cfg.experiment.name} ({method}, {protocol.base_count}-{protocol.increment}, "
                f"{protocol.num_steps} steps) in {run_dir}")

    state, start = None, 1
    step_curve: List[list] = []
    accounting: List[list] = []
    latest = latest_checkpoint(run_dir) if resume else None
    if latest:
        state, saved_protocol, manifest = load_checkpoint(latest, expected_hash=digest)
        state.to(settings.device)
        if saved_protocol != protocol:
            raise CheckpointMismatchError(f"{latest}: protocol differs from the configured one")
        step_curve = manifest['extra'].get('step_curve', [])
        accounting = manifest['extra'].get('accounting', [])
        start = state.num_steps + 1
        logger.info(f"Resuming after step {state.num_steps} from {latest}")
    else:
        for stale in (os.path.join(run_dir, 'checkpoints'), os.path.join(run_dir, 'loss_log.csv')):
            if os.path.isdir(stale):
                shutil.rmtree(stale)
            elif os.path.exists(stale):
                os.remove(stale)

    log = LossLog(os.path.join(run_dir, 'loss_log.csv'), digest)
    seed = cfg.experiment.seed
    for t in range(start, protocol.num_steps + 1):
        if t == 1:
            state = init_model(cfg.model, catalog, protocol, seed)
        else:
            add_step(state, protocol.classes(t), seed * 1000 + t, freeze=(method == ECLIPSE))
        state.to(settings.device)
        loss_steps = list(range(1, t + 1)) if method == FINETUNE else None
        train_task(state, step_view(train, protocol, t), t, cfg.training, cfg.matching, log, loss_steps)

        accounting.append(_accounting_row(state, t))
        if cfg.experiment.eval_every_step or t == protocol.num_steps:
            result = evaluate_state(cfg, state, catalog, protocol, evaluation, steps=range(1, t + 1))
            for row in _group_rows(result.pq, protocol, catalog):
                step_curve.append([t] + [row[c] for c in GROUP_COLUMNS])
        save_checkpoint(state, protocol, checkpoint_dir(run_dir, t), digest,
                        extra={'step_curve': step_curve, 'accounting': accounting, 'method': method})

    return final_report(cfg, state, catalog, protocol, evaluation, step_curve, accounting)


def final_report(cfg: ExperimentConfig, state: ModelState, catalog: ClassCatalog, protocol: TaskProtocol,
                 evaluation: Sequence[PanopticSample], step_curve: Sequence[list] = (),
                 accounting: Sequence[list] = (), run_dir: Optional[str] = None) -> ReportBundle:
    """Evaluate with every head, write sidecars and the group tables of one run."""
    run_dir = run_dir or cfg.run_dir
    digest, build = cfg.hash, build_id()
    result = evaluate_state(cfg, state, catalog, protocol, evaluation)
    sidecar_dir = os.path.join(run_dir, 'sidecars')
    if os.path.isdir(sidecar_dir):
        shutil.rmtree(sidecar_dir)
    write_sidecars(sidecar_dir, result.evidence, digest, build)

    bundle = ReportBundle(run_dir, digest, build)
    pq_rows = _group_rows(result.pq, protocol, catalog)
    bundle.add_table('pq', GROUP_COLUMNS, dict_rows(pq_rows, GROUP_COLUMNS), title='Panoptic quality')
    bundle.add_table('pq_classes', PQ_CLASS_HEADER, per_class_rows(result.pq, catalog), title='PQ per class')
    if result.miou is not None:
        miou_rows = _group_rows(result.miou, protocol, catalog)
        bundle.add_table('miou', ['group', 'classes', 'miou'], dict_rows(miou_rows, ['group', 'classes', 'miou']),
                         title='Mean IoU')
        bundle.add_table('miou_classes', MIOU_CLASS_HEADER, per_class_rows(result.miou, catalog),
                         title='IoU per class')
    if step_curve:
        bundle.add_table('step_curve', ['step'] + GROUP_COLUMNS, step_curve, title='PQ after each step')
    if accounting:
        bundle.add_table('accounting', ACCOUNTING_COLUMNS, accounting, title='Parameters and cost')

    base_after_first = next((r[4] for r in step_curve if r[0] == 1 and r[1] == 'base'), '-')
    head1_only = evaluate_state(cfg, state, catalog, protocol, evaluation, steps=[1])
    bundle.summary = {
        'method': cfg.experiment.method,
        'steps': state.num_steps,
        'pq_base': _pq_of(pq_rows, 'base'),
        'pq_new': _pq_of(pq_rows, 'new'),
        'pq_all': _pq_of(pq_rows, 'all'),
        'pq_base_after_step1': base_after_first,
        'pq_base_head1_final': _pq_of(_group_rows(head1_only.pq, protocol, catalog), 'base'),
        'trainable_params': count_trainable(state),
        'total_prompts': sum(state.num_prompts(k) for k in range(1, state.num_steps + 1)),
        'flops': count_flops(state),
        'delta': cfg.inference.delta,
    }
    write_bundle(bundle, workbook=cfg.experiment.workbook)
    draw_plots(run_dir)
    logger.info(f"PQ base/new/all: {bundle.summary['pq_base']} / {bundle.summary['pq_new']} / "
                f"{bundle.summary['pq_all']}")
    return bundle


def load_final(cfg: ExperimentConfig) -> Tuple[ModelState, TaskProtocol]:
    latest = latest_checkpoint(cfg.run_dir)
    if latest is None:
        raise FormatError(f"{cfg.run_dir}: no checkpoints; run the scenario first")
    state, protocol, _ = load_checkpoint(latest, expected_hash=cfg.hash)
    state.to(settings.device)
    return state, protocol


@timed("eval")
def evaluate(cfg: ExperimentConfig, only_steps: Optional[Sequence[int]] = None) -> ReportBundle:
    """Re-evaluate the newest checkpoint of a run; writes its tables under <run>/eval."""
    configure_torch()
    state, protocol = load_final(cfg)
    catalog, _, evaluation = load_datasets(cfg)
    out = os.path.join(cfg.run_dir, 'eval')
    result = evaluate_state(cfg, state, catalog, protocol, evaluation, steps=only_steps)
    bundle = ReportBundle(out, cfg.hash, build_id())
    rows = _group_rows(result.pq, protocol, catalog)
    bundle.add_table('pq', GROUP_COLUMNS, dict_rows(rows, GROUP_COLUMNS), title='Panoptic quality')
    bundle.add_table('pq_classes', PQ_CLASS_HEADER, per_class_rows(result.pq, catalog), title='PQ per class')
    if result.miou is not None:
        miou_rows = _group_rows(result.miou, protocol, catalog)
        bundle.add_table('miou', ['group', 'classes', 'miou'], dict_rows(miou_rows, ['group', 'classes', 'miou']),
                         title='Mean IoU')
    bundle.summary = {'steps': state.num_steps, 'evaluated_steps': list(only_steps or range(1, state.num_steps + 1)),
                      'pq_all': _pq_of(rows, 'all')}
    return write_bundle(bundle, workbook=cfg.experiment.workbook)


@timed("export-predictions")
def export_predictions(cfg: ExperimentConfig) -> ReportBundle:
    """COCO-panoptic dump (with segment scores) of the newest checkpoint on the eval set, plus sidecars."""
    configure_torch()
    state, _ = load_final(cfg)
    catalog, _, evaluation = load_datasets(cfg)
    out = os.path.join(cfg.run_dir, 'predictions')
    predictions, _, evidence = predict(state, evaluation, catalog, inference_config(cfg),
                                       batch_size=cfg.experiment.eval_batch_size)
    samples = [p.to_sample(s.image) for p, s in zip(predictions, evaluation)]
    annotation = write_coco_panoptic(catalog, samples, os.path.join(out, 'panoptic_pred.json'),
                                     os.path.join(out, 'images'), scores=[p.scores() for p in predictions])
    write_sidecars(os.path.join(out, 'sidecars'), evidence, cfg.hash, build_id())
    bundle = ReportBundle(out, cfg.hash, build_id(), files=[annotation])
    bundle.summary = {'images': len(predictions), 'segments': sum(len(p.segments) for p in predictions)}
    return write_bundle(bundle, workbook=False)


# ─── Sweeps and ablations ─────────────────────────────────────────────────────

def _pq_from_evidence(evidence: Sequence[ImageEvidence], evaluation: Sequence[PanopticSample],
                      catalog: ClassCatalog, protocol: TaskProtocol, inference: InferenceConfig,
                      semantic: bool = False) -> Tuple[List[Dict[str, str]], Optional[List[Dict[str, str]]]]:
    by_id = {s.image_id: s for s in evaluation}
    missing = [e.image_id for e in evidence if e.image_id not in by_id]
    if missing:
        raise FormatError(f"sidecars for unknown images {missing[:5]}")
    gts = [by_id[e.image_id] for e in evidence]
    outputs = [predict_image(e, catalog, inference, semantic) for e in evidence]
    pq, miou = score_predictions([o[0] for o in outputs], [o[1] for o in outputs], gts,
                                 standard_groups(protocol, catalog))
    return _group_rows(pq, protocol, catalog), (_group_rows(miou, protocol, catalog) if miou else None)


@timed("sweep-delta")
def sweep_delta(cfg: ExperimentConfig, deltas: Optional[Sequence[float]] = None) -> ReportBundle:
    """One PQ row per δ, recomputed from the run's evidence sidecars; nothing is retrained."""
    deltas = list(cfg.experiment.sweep_deltas if deltas is None else deltas)
    manifest = read_manifest(latest_checkpoint(cfg.run_dir) or os.path.join(cfg.run_dir, 'checkpoints'))
    if manifest['config_hash'] != cfg.hash:
        raise CheckpointMismatchError(f"{cfg.run_dir}: run belongs to config {manifest['config_hash']}")
    protocol = TaskProtocol.from_dict(manifest['protocol'])
    evidence = read_sidecars(os.path.join(cfg.run_dir, 'sidecars'))
    catalog, _, evaluation = load_datasets(cfg)

    rows = []
    for delta in deltas:
        inference = replace(inference_config(cfg), delta=float(delta))
        groups, _ = _pq_from_evidence(evidence, evaluation, catalog, protocol, inference)
        rows.append([delta] + [_pq_of(groups, g) for g in ('base', 'new', 'all')])
        logger.info(f"delta={delta}: PQ base/new/all {rows[-1][1]} / {rows[-1][2]} / {rows[-1][3]}")

    bundle = ReportBundle(cfg.run_dir, cfg.hash, build_id())
    table = Table('delta_sweep', ['delta', 'base_pq', 'new_pq', 'all_pq'], rows, 'Effect of delta')
    bundle.tables[table.name] = table
    if rows:
        bundle.files.append(write_table(os.path.join(cfg.run_dir, DELTA_SWEEP_CSV), table, cfg.hash,
                                        bundle.build_id))
        bundle.files.extend(draw_plots(cfg.run_dir))
    return bundle


def _ordering_seeds(cfg: ExperimentConfig, n: int) -> List[Optional[int]]:
    first = cfg.protocol.ordering_seed
    if first is None:
        return [None] + list(range(1, n))
    return [first + i for i in range(n)]


def quartiles(values: Sequence[float]) -> Dict[str, float]:
    arr = np.asarray(values, dtype=np.float64)
    q1, median, q3 = np.percentile(arr, [25, 50, 75])
    return {'min': float(arr.min()), 'q1': float(q1), 'median': float(median), 'q3': float(q3),
            'max': float(arr.max()), 'mean': float(arr.mean())}


@timed("sweep-orderings")
def sweep_orderings(cfg: ExperimentConfig, n_orderings: Optional[int] = None,
                    resume: bool = False) -> ReportBundle:
    """Full scenarios over seeded class orderings; per-ordering PQ and quartiles per group."""
    n = n_orderings or cfg.experiment.n_orderings
    root = cfg.run_dir
    rows = []
    for i, ordering_seed in enumerate(_ordering_seeds(cfg, n)):
        sub = replace(cfg, protocol=replace(cfg.protocol, ordering_seed=ordering_seed),
                      experiment=replace(cfg.experiment, output_dir=os.path.join(root, 'orderings', f"ordering_{i:02d}")))
        summary = run_scenario(sub, resume=resume).summary
        rows.append([i, '' if ordering_seed is None else ordering_seed,
                     summary['pq_base'], summary['pq_new'], summary['pq_all']])

    bundle = ReportBundle(root, cfg.hash, build_id())
    bundle.add_table('orderings', ['ordering', 'ordering_seed', 'base_pq', 'new_pq', 'all_pq'], rows,
                     title='Class orderings')
    stats_rows = []
    for index, group in enumerate(('base', 'new', 'all'), 2):
        values = [float(r[index]) for r in rows if r[index] != '-']
        if values:
            q = quartiles(values)
            stats_rows.append([group, len(values)] + [f"{q[k]:.1f}" for k in ('min', 'q1', 'median', 'q3', 'max', 'mean')])
    bundle.add_table('orderings_summary', ['group', 'runs', 'min', 'q1', 'median', 'q3', 'max', 'mean'],
                     stats_rows, title='Ordering spread')
    bundle.summary = {'orderings': n}
    write_bundle(bundle, workbook=cfg.experiment.workbook)
    draw_plots(root)
    return bundle


def _variant_name(switches: Sequence[str], counts: Optional[Tuple[int, int]]) -> str:
    parts = list(switches) or ['main']
    if counts:
        parts.append(f"prompts_{counts[0]}_{counts[1]}")
    return '+'.join(parts)


ABLATION_COLUMNS = ['variant', 'method', 'protocol_mode', 'prompt_mode', 'logit_manipulation', 'base_prompts', 'step_prompts',
                    'total_prompts', 'trainable_params', 'flops', 'base_pq', 'new_pq', 'all_pq']


@timed("ablate")
def ablate(cfg: ExperimentConfig, switches: Optional[Sequence[str]] = None,
           prompt_counts: Optional[Sequence[Tuple[int, int]]] = None, resume: bool = False) -> ReportBundle:
    """
    One row per switch combination (and per prompt-count pair on the main
    setting). Variants differing only in logit manipulation share a trained
    run and are re-scored from its sidecars.
    """
    switches = list(cfg.experiment.ablate_switches if switches is None else switches)
    unknown = set(switches) - set(SWITCHES)
    if unknown:
        raise ConfigError(f"unknown ablation switches {sorted(unknown)}")
    if prompt_counts is None:
        flat = cfg.experiment.ablate_prompt_counts
        prompt_counts = [(flat[i], flat[i + 1]) for i in range(0, len(flat), 2)]

    combos: List[Tuple[Tuple[str, ...], Optional[Tuple[int, int]]]] = []
    for r in range(len(switches) + 1):
        combos.extend((c, None) for c in itertools.combinations(switches, r))
    combos.extend(((), tuple(pc)) for pc in prompt_counts)

    root = cfg.run_dir
    catalog, _, evaluation = load_datasets(cfg)
    trained: Dict[str, Tuple[ExperimentConfig, ReportBundle]] = {}
    rows = []
    for combo, counts in combos:
        model = cfg.model
        if 'shallow' in combo:
            model = replace(model, prompt_mode=SHALLOW)
        if counts:
            model = replace(model, base_prompts=counts[0], step_prompts=counts[1])
        method = FINETUNE if 'finetune' in combo else cfg.experiment.method
        protocol_cfg = replace(cfg.protocol, mode=DISJOINT) if 'disjoint' in combo else cfg.protocol
        train_key = _variant_name([s for s in combo if s != 'no_logit_manipulation'], counts)
        sub = replace(cfg, model=model, protocol=protocol_cfg, experiment=replace(
            cfg.experiment, method=method, output_dir=os.path.join(root, 'ablation', train_key)))
        if train_key not in trained:
            try:
                trained[train_key] = (sub, run_scenario(sub, resume=resume))
            except ProtocolError as e:
                # disjoint filtering can leave a step without images
                if 'disjoint' not in combo:
                    raise
                logger.warning(f"Ablation variant {train_key} skipped: {e}")
                trained[train_key] = (sub, None)
        sub, bundle = trained[train_key]

        manipulation = 'no_logit_manipulation' not in combo and method == ECLIPSE
        head = [_variant_name(combo, counts), method, protocol_cfg.mode, model.prompt_mode, int(manipulation),
                model.base_prompts or '', model.step_prompts or '']
        if bundle is None:
            rows.append(head + ['', '', '', '-', '-', '-'])
            continue
        if 'no_logit_manipulation' in combo:
            protocol = make_protocol(sub, catalog)
            inference = replace(inference_config(sub), logit_manipulation=False)
            evidence = read_sidecars(os.path.join(sub.run_dir, 'sidecars'))
            groups, _ = _pq_from_evidence(evidence, evaluation, catalog, protocol, inference)
            pqs = [_pq_of(groups, g) for g in ('base', 'new', 'all')]
        else:
            pqs = [bundle.summary['pq_base'], bundle.summary['pq_new'], bundle.summary['pq_all']]
        rows.append(head + [bundle.summary['total_prompts'], bundle.summary['trainable_params'],
                            bundle.summary['flops']] + pqs)

    report = ReportBundle(root, cfg.hash, build_id())
    report.add_table('ablation', ABLATION_COLUMNS, rows, title='Ablation')
    report.summary = {'variants': len(rows), 'trained_runs': len(trained)}
    return write_bundle(report, workbook=cfg.experiment.workbook)


def emit_plots(bundle: ReportBundle) -> List[str]:
    """Figures of a bundle's run directory, drawn from its CSV files only."""
    paths = draw_plots(bundle.run_dir)
    bundle.files.extend(p for p in paths if p not in bundle.files)
    return paths
