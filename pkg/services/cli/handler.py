"""
Experiment commands.

FLOW (pipeline):
1. train      -> model.wmck + train_report.csv
2. attack     -> attack_<i>_<kind>.wmck + attack_<i>_<kind>.csv per plan
3. evaluate   -> metrics_<checkpoint>.json
4. landscape  -> landscape.csv (+ .json) + embeddings.csv
5. shift      -> bn_shift.csv
6. report     -> summary.csv over one or more manifests

Every stage records its artifacts (with SHA-256) in <out>/manifest.json.
"""
import json
from dataclasses import asdict, dataclass
from pathlib import Path

from shared.errors import NumericError, ValidationError
from shared.logger import get_logger
from shared.utils import error_handler, load_settings, write_csv, write_json
from services.attacks.handler import run_attack
from services.attacks.plans import AttackReport
from services.cli.config import load_config, with_output_dir
from services.cli.manifest import load_manifest, record_stage, save_manifest
from services.cli.report import HEADER as REPORT_HEADER, entry_from_manifest, summarize
from services.embedders.handler import embed
from services.embedders.plans import EvalSets, TrainReport
from services.engine.checkpoint import load_checkpoint, save_checkpoint, sidecar_path
from services.landscape.embeddings import write_embeddings
from services.landscape.handler import (
    adversarial_direction, direction_pair, finetune_direction, origin_deviation,
    removal_radius, scan, write_grid
)
from services.landscape.shift import bn_domain_shift, shift_summary, write_shift
from services.watermark.datasets import (
    load_idx_dataset, load_image_dir, make_shapes, split_owner_attacker
)
from services.watermark.metrics import benign_accuracy, per_class_accuracy, wsr
from services.watermark.triggers import build_watermark_testset, build_watermarked_trainset

logger = get_logger(__name__)

CHECKPOINT_NAME = 'model.wmck'
SHIFT_SAMPLES = 256


@dataclass
class ExperimentData:
    owner: object
    attacker: object
    clean: object
    wm: object
    test: object
    wm_test: object
    target: int

    @property
    def evaluation(self):
        return EvalSets(self.test, self.wm_test, self.target)


def prepare_data(config):
    """Pool, disjoint owner/attacker split, test set and watermark sets."""
    spec = config.dataset
    if spec.kind == 'builtin':
        pool = make_shapes(spec.train_count, spec.num_classes, spec.image_size,
                           seed=spec.seed, role='owner-train', noise=spec.noise)
        test = make_shapes(spec.test_count, spec.num_classes, spec.image_size,
                           seed=spec.seed + 1, role='test', noise=spec.noise)
    elif spec.kind == 'idx':
        pool = load_idx_dataset(spec.train_images, spec.train_labels, spec.num_classes, 'owner-train')
        test = load_idx_dataset(spec.test_images, spec.test_labels, spec.num_classes, 'test')
    else:
        pool = load_image_dir(spec.train_dir, spec.num_classes, 'owner-train')
        test = load_image_dir(spec.test_dir, spec.num_classes, 'test')

    owner, attacker = split_owner_attacker(pool, config.split.owner, config.split.seed)
    clean, wm = build_watermarked_trainset(owner, config.watermark, config.watermark_fraction)
    wm_test = build_watermark_testset(test, config.watermark, start=len(wm))
    logger.info("Experiment data prepared", extra={'fields': {
        'owner': len(owner), 'attacker': len(attacker), 'watermark': len(wm), 'test': len(test)}})
    return ExperimentData(owner, attacker, clean, wm, test, wm_test, config.watermark.target_label)


def _output_dir(config):
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _checkpoint(out, path=None):
    return Path(path) if path else out / CHECKPOINT_NAME


# ============================================================================
# STAGES
# ============================================================================

def run_train(config, data=None):
    out = _output_dir(config)
    data = data or prepare_data(config)
    model, report = embed(config.train, data.clean, data.wm, data.evaluation)

    ckpt = out / CHECKPOINT_NAME
    save_checkpoint(model, ckpt, provenance={
        'stage': 'train', 'embedder': config.train.embedder, 'config_hash': config.config_hash()})
    csv_path = write_csv(out / 'train_report.csv', TrainReport.HEADER, report.rows())

    summary = {'embedder': config.train.embedder, 'final_wsr': report.final_wsr,
               'final_ba': report.final_ba, 'epochs': len(report.epochs),
               'skipped_perturbations': report.skipped_perturbations}
    if report.perturbation_ratios:
        summary['max_ratio_deviation'] = max(abs(r - 1.0) for r in report.perturbation_ratios)
    manifest = load_manifest(out, config.config_hash())
    record_stage(manifest, out, 'train', [ckpt, sidecar_path(ckpt), csv_path], summary)
    save_manifest(manifest, out)
    logger.info("Training finished", extra={'fields': {**summary, 'wall_clock': report.wall_clock}})
    return summary


def run_attack_stage(config, checkpoint=None, data=None):
    out = _output_dir(config)
    model, metadata = load_checkpoint(_checkpoint(out, checkpoint))
    if not config.attacks:
        logger.info("No attacks configured")
        return {'attacks': []}
    data = data or prepare_data(config)

    paths, rows = [], []
    for i, plan in enumerate(config.attacks):
        victim, report = run_attack(model, plan, data.attacker, data.evaluation)
        stem = f'attack_{i}_{plan.attack}'
        ckpt = out / f'{stem}.wmck'
        save_checkpoint(victim, ckpt, provenance={
            'stage': 'attack', 'attack': plan.label, 'source_sha256': metadata.get('sha256'),
            'plan': asdict(plan), 'layer': report.layer, 'pruned': report.pruned})
        csv_path = write_csv(out / f'{stem}.csv', AttackReport.HEADER, report.rows())
        paths += [ckpt, sidecar_path(ckpt), csv_path]
        rows.append({'attack': plan.label, 'before_wsr': report.before_wsr,
                     'after_wsr': report.after_wsr, 'after_ba': report.after_ba,
                     'csv': csv_path.name})

    summary = {'attacks': rows}
    manifest = load_manifest(out, config.config_hash())
    record_stage(manifest, out, 'attack', paths, summary)
    save_manifest(manifest, out)
    return summary


def run_evaluate(config, checkpoint=None, data=None):
    out = _output_dir(config)
    ckpt = _checkpoint(out, checkpoint)
    model, metadata = load_checkpoint(ckpt)
    data = data or prepare_data(config)
    metrics = {
        'checkpoint': ckpt.name,
        'sha256': metadata.get('sha256'),
        'ba': benign_accuracy(model, data.test),
        'wsr': wsr(model, data.wm_test, data.target),
        'per_class_accuracy': per_class_accuracy(model, data.test),
    }
    path = write_json(out / f'metrics_{ckpt.stem}.json', metrics)
    manifest = load_manifest(out, config.config_hash())
    record_stage(manifest, out, f'evaluate:{ckpt.stem}', [path],
                 {'ba': metrics['ba'], 'wsr': metrics['wsr']})
    save_manifest(manifest, out)
    return metrics


def run_landscape(config, checkpoint=None, data=None, threads=1):
    out = _output_dir(config)
    model, _ = load_checkpoint(_checkpoint(out, checkpoint))
    data = data or prepare_data(config)
    grid = config.landscape

    d_adv = adversarial_direction(model, data.wm)
    d_ft = finetune_direction(model, data.attacker, grid.ft_iterations, grid.ft_lr,
                              grid.ft_batch_size, grid.seed)
    pair = direction_pair(model, d_adv, d_ft)
    result = scan(model, pair, grid, data.attacker, data.wm_test, data.target,
                  test=data.test, threads=threads)

    deviation = origin_deviation(result, model, data.wm_test, data.target, data.test)
    if deviation > grid.origin_tolerance:
        raise NumericError(
            f"Origin cell deviates by {deviation:.4f} from the unmodified model "
            f"(tolerance {grid.origin_tolerance}); check BatchNorm re-estimation")
    radius = removal_radius(result)
    result.metadata.update({
        'origin_deviation': deviation,
        'removal_radius': radius,
        'ft_relative_distance': pair.ft_norm / result.metadata['theta_norm'],
    })
    csv_path, meta_path = write_grid(result, out / 'landscape.csv')
    emb_path = write_embeddings(model, data.test, data.wm_test, out / 'embeddings.csv')

    summary = {'removal_radius': radius, 'origin_deviation': deviation,
               'ft_relative_distance': result.metadata['ft_relative_distance']}
    manifest = load_manifest(out, config.config_hash())
    record_stage(manifest, out, 'landscape', [csv_path, meta_path, emb_path], summary)
    save_manifest(manifest, out)
    return summary


def run_shift(config, checkpoint=None, data=None):
    out = _output_dir(config)
    model, _ = load_checkpoint(_checkpoint(out, checkpoint))
    data = data or prepare_data(config)
    count = min(SHIFT_SAMPLES, len(data.test))
    rows = bn_domain_shift(model, data.test.images[:count], data.wm_test.images[:count])
    path = write_shift(rows, out / 'bn_shift.csv')
    summary = shift_summary(rows)
    manifest = load_manifest(out, config.config_hash())
    record_stage(manifest, out, 'shift', [path], summary)
    save_manifest(manifest, out)
    return summary


def run_report(manifests, out):
    if not manifests:
        raise ValidationError("report needs at least one manifest")
    rows = summarize([entry_from_manifest(m) for m in manifests])
    path = write_csv(Path(out) / 'summary.csv', REPORT_HEADER, rows)
    logger.info(f"Summary written to {path}", extra={'fields': {'rows': len(rows)}})
    return {'summary': str(path), 'rows': len(rows)}


# ============================================================================
# COMMANDS
# ============================================================================

def _config(args):
    config = load_config(args.config, args.seed)
    return with_output_dir(config, args.out)


def _emit(payload):
    print(json.dumps(payload, indent=2, default=str))


@error_handler
def cmd_train(args):
    _emit(run_train(_config(args)))


@error_handler
def cmd_attack(args):
    _emit(run_attack_stage(_config(args), args.checkpoint))


@error_handler
def cmd_evaluate(args):
    _emit(run_evaluate(_config(args), args.checkpoint))


@error_handler
def cmd_landscape(args):
    settings = load_settings()
    _emit(run_landscape(_config(args), args.checkpoint, threads=settings.threads))


@error_handler
def cmd_shift(args):
    _emit(run_shift(_config(args), args.checkpoint))


@error_handler
def cmd_report(args):
    _emit(run_report(args.manifests, args.out or '.'))


@error_handler
def cmd_pipeline(args):
    settings = load_settings()
    config = _config(args)
    data = prepare_data(config)
    _emit({
        'train': run_train(config, data),
        'attack': run_attack_stage(config, data=data),
        'evaluate': run_evaluate(config, data=data),
        'landscape': run_landscape(config, data=data, threads=settings.threads),
    })
