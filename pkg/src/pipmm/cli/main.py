"""
pipmm CLI Main Module.

Command-line interface for data generation, staged training, evaluation,
attention visualization, compression benchmarks, adapter sweeps, gradient
checks and baseline/PIP comparisons. Every command writes its artifacts
under ``<root>/<config digest[:12]>-s<seed>``.
"""

import argparse
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..bench.cost import CostReport, cost_profile
from ..bench.dataset import SyntheticCorpus, gen_dataset, save_dataset
from ..bench.evaluation import attention_hitrate, compare_runs, evaluate_accuracy, \
    wilson_interval
from ..bench.gradsuite import run_suite, tolerance_for
from ..config import RunConfig
from ..core.log import ErrorContext, RunLogger
from ..errors import ContractError, PipmmError
from ..models.bridge import count_params
from ..models.pipeline import PIPConfig, PIPModel
from ..models.text_model import Vocab
from ..models.vit import cls_attention_map
from ..training.checkpoint import load_checkpoint, save_checkpoint
from ..training.harness import MetricsRow, Trainer, write_metrics
from .heatmap import write_heatmap
from .report import write_csv, write_report

DEFAULT_OUT = 'runs'
CHECKPOINT = 'model.ckpt'
BACKBONE_GROUPS = ('llm', 'vit', 'visual_adapter')
SWEEP_GRID = (('linear', 1), ('mlp', 1), ('mlp', 2), ('mlp', 3), ('mlp', 4), ('mlp', 5))


@dataclass
class RunContext:
    config: RunConfig
    run_dir: Path
    logger: RunLogger
    command: str

    @property
    def seed(self) -> int:
        return self.config.train.seed

    def path(self, *parts: str) -> Path:
        target = self.run_dir.joinpath(*parts)
        target.parent.mkdir(parents=True, exist_ok=True)
        return target


# --- shared workflow ------------------------------------------------------


def make_corpora(config: RunConfig) -> Tuple[SyntheticCorpus, SyntheticCorpus]:
    """Training corpus and a disjoint-seed evaluation corpus."""
    data = config.data_config()
    train = gen_dataset(data, config.data.seed, config.data.n)
    held_out = gen_dataset(data, config.data.seed + 1, config.data.eval_n)
    return train, held_out


def stage_samples(corpus: SyntheticCorpus, stage: str) -> List:
    if stage == 'backbone':
        return corpus.captions + corpus.easy + corpus.confusion
    if stage == 'pretrain':
        return list(corpus.captions)
    return corpus.confusion + corpus.easy


def build_model(config: RunConfig, seed: int, bridge_kind: Optional[str] = None,
                bridge_depth: Optional[int] = None) -> PIPModel:
    return PIPModel(config.pip_config(bridge_kind, bridge_depth), config.vocab(), seed)


def transplant_backbone(source: PIPModel, target: PIPModel) -> PIPModel:
    """Copy the llm, vit and visual_adapter weights from ``source``."""
    for group in BACKBONE_GROUPS:
        getattr(target, group).load_state_dict(getattr(source, group).state_dict())
    if target.config.warm_start:
        target.sync_bridge()
    return target


def run_stages(ctx: RunContext, model: PIPModel, corpus: SyntheticCorpus,
               stages: Sequence[str], seed: int,
               rng: Optional[np.random.Generator] = None,
               ) -> Tuple[List[MetricsRow], Optional[Trainer]]:
    history: List[MetricsRow] = []
    trainer = None
    rng = rng if rng is not None else np.random.default_rng(seed)
    for stage in stages:
        train_cfg = ctx.config.train_config(stage, seed)
        if train_cfg.epochs == 0:
            continue
        ctx.logger.event('stage_start', stage=stage, seed=seed, epochs=train_cfg.epochs)
        try:
            trainer = Trainer(model, train_cfg, ctx.logger, rng=rng)
            history.extend(trainer.train(stage_samples(corpus, stage)))
        except PipmmError as e:
            e.details.setdefault('stage', stage)
            raise
        if stage == 'backbone' and model.config.warm_start:
            model.sync_bridge()
    model.use_image_class = False
    return history, trainer


def train_backbone(ctx: RunContext, corpus: SyntheticCorpus,
                   seed: int) -> Tuple[PIPModel, List[MetricsRow]]:
    model = build_model(ctx.config, seed)
    stages = [s for s in ctx.config.train.stages if s == 'backbone']
    history, _ = run_stages(ctx, model, corpus, stages, seed)
    return model, history


def train_variant(ctx: RunContext, corpus: SyntheticCorpus, seed: int, backbone: PIPModel,
                  bridge_kind: Optional[str] = None,
                  bridge_depth: Optional[int] = None) -> Tuple[PIPModel, List[MetricsRow]]:
    """Fresh bridge on a copy of ``backbone``, trained through the bridge stages."""
    model = transplant_backbone(backbone, build_model(ctx.config, seed, bridge_kind, bridge_depth))
    stages = [s for s in ctx.config.train.stages if s != 'backbone']
    history, _ = run_stages(ctx, model, corpus, stages, seed)
    return model, history


def checkpoint_config(ctx: RunContext, model: PIPModel, seed: int) -> Dict:
    return {'pip': model.config.to_dict(), 'alphabet': model.vocab.alphabet, 'seed': seed,
            'digest': ctx.config.digest()}


def model_from_checkpoint(path: Path) -> PIPModel:
    checkpoint = load_checkpoint(path)
    cfg = checkpoint.config
    model = PIPModel(PIPConfig.from_dict(cfg['pip']), Vocab(cfg['alphabet']), cfg['seed'])
    checkpoint.restore(model)
    return model


def load_model(ctx: RunContext, allow_untrained: bool = False) -> PIPModel:
    path = ctx.run_dir / CHECKPOINT
    if path.exists():
        return model_from_checkpoint(path)
    if not allow_untrained:
        raise ContractError(f"no checkpoint at {path}; run `pipmm train` with this config first")
    ctx.logger.logger.warning("no checkpoint at %s, using a randomly initialized model", path)
    return build_model(ctx.config, ctx.seed)


def pick_sample(ctx: RunContext, corpus: SyntheticCorpus):
    index = ctx.config.eval.sample
    if not 0 <= index < len(corpus.confusion):
        raise ContractError(f"eval.sample={index} outside [0, {len(corpus.confusion)})")
    return corpus.confusion[index]


def half_keep(config: RunConfig) -> int:
    return max(1, config.full_visual_tokens // 2)


# --- commands -------------------------------------------------------------


def cmd_gen_data(ctx: RunContext, args: argparse.Namespace) -> int:
    train, held_out = make_corpora(ctx.config)
    written = []
    for prefix, corpus in (('train', train), ('eval', held_out)):
        for split, samples in corpus.splits().items():
            path = ctx.path('data', f"{prefix}_{split}.tsv")
            save_dataset(samples, path)
            written.append(path)
    for path in written:
        print(f"wrote {path}")
    ctx.logger.event('gen_data', files=len(written), n=ctx.config.data.n)
    return 0


def cmd_train(ctx: RunContext, args: argparse.Namespace) -> int:
    train, _ = make_corpora(ctx.config)
    seed = ctx.seed
    rng = np.random.default_rng(seed)
    model = build_model(ctx.config, seed)
    history, trainer = run_stages(ctx, model, train, ctx.config.train.stages, seed, rng)
    write_metrics(str(ctx.path('metrics.csv')), history)
    save_checkpoint(model, ctx.path(CHECKPOINT), checkpoint_config(ctx, model, seed),
                    optimizer=trainer.optimizer.state if trainer else None, rng=rng,
                    step=trainer.step if trainer else 0)
    for row in history:
        print(f"stage={row.stage} step={row.step} loss={row.loss:.4f} "
              f"exact_match={row.exact_match:.3f} seq_len_mean={row.seq_len_mean:.1f}")
    print(f"checkpoint {ctx.run_dir / CHECKPOINT}")
    return 0


def cmd_eval(ctx: RunContext, args: argparse.Namespace) -> int:
    model = load_model(ctx)
    _, held_out = make_corpora(ctx.config)
    rows = []
    accuracy_rows = []
    for split in ('easy', 'confusion'):
        report = evaluate_accuracy(model, getattr(held_out, split))
        low, high = report.interval
        rows.append([split, model.config.full_visual_tokens, report.n, report.accuracy, low, high])
        accuracy_rows.append({'split': split, 'n': report.n, 'accuracy': report.accuracy,
                              'low': low, 'high': high})

    full_acc = accuracy_rows[-1]['accuracy']
    compression = []
    for keep in ctx.config.keep_values:
        report = evaluate_accuracy(model, held_out.confusion,
                                   answer_fn=lambda s, k=keep: model.answer(s, keep=k))
        low, high = report.interval
        rows.append(['confusion', keep, report.n, report.accuracy, low, high])
        compression.append({'keep': keep, 'accuracy': report.accuracy,
                             'drop': full_acc - report.accuracy})
    text_only = evaluate_accuracy(model, held_out.confusion,
                                  answer_fn=lambda s: model.answer(s, with_image=False))
    rows.append(['text_only', 0, text_only.n, text_only.accuracy, *text_only.interval])
    write_csv(ctx.path('accuracy.csv'),
              ('split', 'keep', 'n', 'exact_match', 'ci_low', 'ci_high'), rows)

    hit = attention_hitrate(model, held_out.confusion, ctx.config.vit_layer)
    write_csv(ctx.path('hitrate.csv'),
              ('layer', 'n', 'hit_rate', 'mean_target_mass', 'ci_low', 'ci_high'),
              [[hit.layer, len(hit.hits), hit.hit_rate, hit.mean_target_mass, *hit.interval]])
    write_report(ctx.path('eval_report.md'), 'eval_report.md.j2', {
        'run_name': ctx.run_dir.name,
        'bridge_kind': model.config.bridge.kind,
        'adapter_kind': model.config.adapter.kind,
        'seed': ctx.seed,
        'accuracy': accuracy_rows,
        'compression': compression,
        'hitrate': hit,
    })
    for row in accuracy_rows:
        print(f"split={row['split']} exact_match={row['accuracy']:.3f}")
    for row in compression:
        print(f"keep={row['keep']} exact_match={row['accuracy']:.3f} drop={row['drop']:.3f}")
    print(f"hit_rate={hit.hit_rate:.3f} mean_target_mass={hit.mean_target_mass:.3f}")
    return 0


def cmd_attn_viz(ctx: RunContext, args: argparse.Namespace) -> int:
    model = load_model(ctx, allow_untrained=True)
    _, held_out = make_corpora(ctx.config)
    sample = pick_sample(ctx, held_out)
    out = model.encoder_output(sample)
    layers = args.layers if args.layers else list(range(model.config.vit.layers))
    rows = []
    for layer in layers:
        grid = cls_attention_map(out, layer)
        path = write_heatmap(ctx.path('attn', f"layer{layer}.pgm"), grid,
                             ctx.config.eval.heatmap_upscale)
        side = grid.shape[0]
        for patch, value in enumerate(grid.data.reshape(-1)):
            rows.append([layer, patch, patch // side, patch % side, float(value)])
        print(f"wrote {path}")
    write_csv(ctx.path('attn', 'attention.csv'), ('layer', 'patch', 'row', 'col', 'value'), rows)
    print(f"prompt={sample.prompt!r} answer={sample.answer!r} "
          f"targets={','.join(map(str, sample.target_patch_ids))}")
    return 0


COST_COLUMNS = ('variant', 'keep', 'visual_tokens', 'llm_input_length', 'flops',
                'prompt_flops', 'bridge_flops', 'vit_flops', 'adapter_flops', 'llm_flops',
                'measured_flops', 'peak_live_floats', 'rss_mb', 'wall_ms')


def _cost_row(variant: str, r: CostReport) -> list:
    s = r.flops_by_scope
    return [variant, r.keep, r.visual_tokens, r.llm_input_length, r.flops, s['prompt'],
            s['bridge'], s['vit'], s['adapter'], s['llm'], r.measured_total,
            r.peak_live_floats, r.rss_mb, r.wall_ms]


def cmd_compress_bench(ctx: RunContext, args: argparse.Namespace) -> int:
    model = load_model(ctx, allow_untrained=True)
    _, held_out = make_corpora(ctx.config)
    sample = pick_sample(ctx, held_out)
    max_new = ctx.config.eval.max_new or None
    runs = ctx.config.eval.cost_runs
    rows = [_cost_row('pip', r) for r in cost_profile(model, sample, ctx.config.keep_values,
                                                      max_new=max_new, runs=runs)]
    if model.bridge.prompt_aware:
        baseline = transplant_backbone(model, build_model(ctx.config, ctx.seed, 'static'))
        rows.append(_cost_row('baseline', cost_profile(baseline, sample, [None],
                                                       max_new=max_new, runs=runs)[0]))
    write_csv(ctx.path('cost.csv'), COST_COLUMNS, rows)
    for row in rows:
        print(f"variant={row[0]} keep={row[1]} llm_input_length={row[3]} flops={row[4]} "
              f"measured_flops={row[10]} wall_ms={row[13]:.2f}")
    return 0


def cmd_sweep(ctx: RunContext, args: argparse.Namespace) -> int:
    train, held_out = make_corpora(ctx.config)
    backbone, _ = train_backbone(ctx, train, ctx.seed)
    m = ctx.config.model
    rows = []
    for kind, depth in SWEEP_GRID:
        model, history = train_variant(ctx, train, ctx.seed, backbone, kind, depth)
        expected = count_params(kind, m.d_llm, m.vit_width, depth, m.bridge_hidden or None)
        actual = model.bridge.num_parameters()
        if actual != expected:
            raise ContractError(f"{kind}{depth} bridge has {actual} parameters, "
                                f"closed form gives {expected}")
        final_loss = history[-1].loss if history else float('nan')
        accuracy = evaluate_accuracy(model, held_out.confusion).accuracy
        name = kind if kind == 'linear' else f"mlp{depth}"
        rows.append([name, depth, actual, final_loss, accuracy])
        print(f"adapter={name} param_count={actual} final_loss={final_loss:.4f} "
              f"accuracy={accuracy:.3f}")
    write_csv(ctx.path('sweep.csv'), ('adapter', 'depth', 'param_count', 'final_loss',
                                      'accuracy'), rows)
    return 0


def cmd_grad_check(ctx: RunContext, args: argparse.Namespace) -> int:
    failures = 0
    rows = []

    def progress(name, report):
        ok = report.max_relative_error < tolerance_for(name)
        print(f"module={name} max_rel_err={report.max_relative_error:.3e} "
              f"worst={report.worst_parameter} ok={ok}")

    reports = run_suite(ctx.seed, progress=progress)
    for name, report in reports.items():
        tolerance = tolerance_for(name)
        ok = report.max_relative_error < tolerance
        failures += not ok
        rows.append([name, report.max_relative_error, report.worst_parameter, tolerance,
                     ok])
    write_csv(ctx.path('gradcheck.csv'),
              ('module', 'max_relative_error', 'worst_parameter', 'tolerance', 'passed'), rows)
    ctx.logger.event('grad_check', failures=failures, modules=len(rows))
    return 0 if failures == 0 else 1


AB_COLUMNS = ('seed', 'baseline_full', 'pip_full', 'baseline_half', 'pip_half',
              'baseline_hit', 'pip_hit', 'wins', 'losses', 'ties')


def cmd_ab_compare(ctx: RunContext, args: argparse.Namespace) -> int:
    train, held_out = make_corpora(ctx.config)
    half = half_keep(ctx.config)
    layer = ctx.config.vit_layer
    rows = []
    hits = {'pip': [], 'baseline': []}
    wins = losses = total = 0
    for seed in ctx.config.eval.seeds:
        backbone, _ = train_backbone(ctx, train, seed)
        result = {'seed': seed}
        reports = {}
        for variant, kind in (('baseline', 'static'), ('pip', None)):
            model, _ = train_variant(ctx, train, seed, backbone, kind)
            full_report = evaluate_accuracy(model, held_out.confusion)
            half_report = evaluate_accuracy(
                model, held_out.confusion, answer_fn=lambda s, m=model: m.answer(s, keep=half))
            hit = attention_hitrate(model, held_out.confusion, layer)
            reports[variant] = full_report
            hits[variant].extend(hit.hits)
            result[f"{variant}_full"] = full_report.accuracy
            result[f"{variant}_half"] = half_report.accuracy
            result[f"{variant}_hit"] = hit.hit_rate
        comparison = compare_runs(reports['pip'], reports['baseline'])
        result.update(wins=comparison.wins, losses=comparison.losses, ties=comparison.ties)
        wins += comparison.wins
        losses += comparison.losses
        total += comparison.total
        rows.append(result)
        ctx.logger.event('ab_seed', **result)
        print(' '.join(f"{k}={v:.3f}" if isinstance(v, float) else f"{k}={v}"
                       for k, v in result.items()))

    write_csv(ctx.path('ab.csv'), AB_COLUMNS, [[r[c] for c in AB_COLUMNS] for r in rows])
    mean = {c: float(np.mean([r[c] for r in rows])) for c in AB_COLUMNS[1:7]}
    write_report(ctx.path('ab_report.md'), 'ab_report.md.j2', {
        'digest': ctx.config.digest()[:12],
        'seeds': ctx.config.eval.seeds,
        'full_keep': ctx.config.full_visual_tokens,
        'half_keep': half,
        'rows': rows,
        'mean': mean,
        'pip_hit_ci': wilson_interval(sum(hits['pip']), len(hits['pip'])),
        'baseline_hit_ci': wilson_interval(sum(hits['baseline']), len(hits['baseline'])),
        'win_rate': wins / total if total else 0.0,
        'loss_rate': losses / total if total else 0.0,
    })
    print(f"mean pip_full={mean['pip_full']:.3f} baseline_full={mean['baseline_full']:.3f} "
          f"win_rate={wins / total if total else 0.0:.3f}")
    return 0


COMMANDS = {
    'gen-data': (cmd_gen_data, 'Generate the synthetic confusion-mode dataset'),
    'train': (cmd_train, 'Run the configured training stages and save a checkpoint'),
    'eval': (cmd_eval, 'Exact-match accuracy, compression drop and attention hit-rate'),
    'attn-viz': (cmd_attn_viz, 'Write class-slot attention heatmaps for one sample'),
    'compress-bench': (cmd_compress_bench, 'Profile FLOPs, memory and latency per keep value'),
    'sweep-adapter-depth': (cmd_sweep, 'Train linear and mlp1..mlp5 bridges and compare'),
    'grad-check': (cmd_grad_check, 'Finite-difference gradient checks at toy dimensions'),
    'ab-compare': (cmd_ab_compare, 'Train baseline and PIP per seed and compare them'),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', '-c', help='INI run configuration', default=None)
    common.add_argument('--set', dest='overrides', action='append', default=[],
                        metavar='SECTION.KEY=VALUE', help='Override one config value')
    common.add_argument('--out', help='Output root (default: $PIPMM_OUT or runs/)')
    common.add_argument('--log-level', help='Logging level (default: $PIPMM_LOG_LEVEL or INFO)')

    parser = argparse.ArgumentParser(
        prog='pipmm',
        description='Prompt-aware multimodal transformer laboratory',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog='''
Examples:
  pipmm gen-data --config run.ini
  pipmm train --config run.ini --set train.seed=1
  pipmm eval --config run.ini --set train.seed=1
  pipmm attn-viz --config run.ini --layers 0 1
  pipmm grad-check
        '''
    )
    subparsers = parser.add_subparsers(dest='command', help='Available commands')
    for name, (_, help_text) in COMMANDS.items():
        sub = subparsers.add_parser(name, help=help_text, parents=[common])
        if name == 'attn-viz':
            sub.add_argument('--layers', type=int, nargs='*', default=None,
                             help='ViT layers to render (default: all)')
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main CLI entry point; returns the process exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help()
        return 2

    try:
        config = RunConfig.load(args.config, args.overrides)
    except PipmmError as e:
        print(e.to_line(), file=sys.stderr)
        return e.exit_code

    root = Path(args.out or os.getenv('PIPMM_OUT') or DEFAULT_OUT)
    run_dir = root / config.run_name()
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / 'config.ini').write_text(config.render(), encoding='utf-8')
    run_logger = RunLogger(log_level=args.log_level, log_file=str(run_dir / 'run.log'),
                           enable_console=False)
    ctx = RunContext(config, run_dir, run_logger, args.command)
    handler, _ = COMMANDS[args.command]

    run_logger.event('command_start', command=args.command, run_dir=str(run_dir))
    try:
        code = handler(ctx, args)
    except PipmmError as e:
        run_logger.log_error(ErrorContext(args.command, e, stage=e.details.get('stage'),
                                          step=e.details.get('step'), details=e.details))
        print(e.to_line(), file=sys.stderr)
        return e.exit_code
    except Exception as e:
        run_logger.log_error(ErrorContext(args.command, e))
        message = ' '.join(str(e).split())
        print(f"error code=1 type={type(e).__name__} message={message}", file=sys.stderr)
        return 1
    run_logger.event('command_end', command=args.command, exit_code=code)
    return code


if __name__ == '__main__':
    sys.exit(main())
