"""
End-to-end tests for the pipmm command line.
"""

import csv
import os

import pytest

from pipmm.cli.main import AB_COLUMNS, COST_COLUMNS, build_parser, main, stage_samples

pytestmark = pytest.mark.integration


def read_rows(path):
    with open(path, encoding='utf-8', newline='') as f:
        return list(csv.DictReader(f))


@pytest.fixture
def cli(temp_dir, small_config_file, small_run_config):
    """Run a command against the small config; returns (exit code, run directory)."""
    out = os.path.join(temp_dir, 'out')
    run_dir = os.path.join(out, small_run_config.run_name())

    def run(command, *extra):
        code = main([command, '--config', small_config_file, '--out', out, *extra])
        return code, run_dir

    return run


class TestParser:
    """Test argument parsing."""

    def test_commands_registered(self):
        parser = build_parser()
        args = parser.parse_args(['attn-viz', '--layers', '0', '--set', 'train.seed=2'])
        assert args.layers == [0]
        assert args.overrides == ['train.seed=2']

    def test_no_command_prints_help(self, capsys):
        assert main([]) == 2
        assert 'pipmm' in capsys.readouterr().out


class TestStageData:
    """Test which samples each stage trains on."""

    def test_backbone_sees_every_prompt_template(self, corpus):
        samples = stage_samples(corpus, 'backbone')
        assert {s.kind for s in samples} == {'caption', 'easy', 'confusion'}
        assert len(samples) == 3 * len(corpus.captions)

    def test_bridge_stages(self, corpus):
        assert {s.kind for s in stage_samples(corpus, 'pretrain')} == {'caption'}
        assert {s.kind for s in stage_samples(corpus, 'finetune')} == {'easy', 'confusion'}


class TestCommands:
    """Test command artifacts and exit codes."""

    def test_gen_data(self, cli):
        code, run_dir = cli('gen-data')
        assert code == 0
        files = sorted(os.listdir(os.path.join(run_dir, 'data')))
        assert files == sorted(f"{p}_{s}.tsv" for p in ('train', 'eval')
                               for s in ('captions', 'easy', 'confusion'))
        assert os.path.exists(os.path.join(run_dir, 'config.ini'))
        assert os.path.exists(os.path.join(run_dir, 'run.log'))

    def test_train_then_eval(self, cli, capsys):
        code, run_dir = cli('train')
        assert code == 0
        rows = read_rows(os.path.join(run_dir, 'metrics.csv'))
        assert [r['stage'] for r in rows] == ['backbone', 'pretrain', 'finetune']
        assert os.path.exists(os.path.join(run_dir, 'model.ckpt'))
        assert 'checkpoint' in capsys.readouterr().out

        code, _ = cli('eval')
        assert code == 0
        accuracy = read_rows(os.path.join(run_dir, 'accuracy.csv'))
        assert [r['split'] for r in accuracy] == ['easy', 'confusion', 'confusion', 'confusion',
                                                  'text_only']
        assert [int(r['keep']) for r in accuracy[2:]] == [16, 8, 0]
        for row in accuracy:
            assert float(row['ci_low']) <= float(row['exact_match']) <= float(row['ci_high'])
        hit = read_rows(os.path.join(run_dir, 'hitrate.csv'))[0]
        assert 0.0 <= float(hit['hit_rate']) <= 1.0
        with open(os.path.join(run_dir, 'eval_report.md'), encoding='utf-8') as f:
            assert 'confusion' in f.read()

    def test_eval_without_checkpoint(self, cli, capsys):
        code, _ = cli('eval')
        assert code == 1
        assert capsys.readouterr().err.startswith('error code=1 type=ContractError')

    def test_bad_override(self, cli, capsys):
        code, _ = cli('train', '--set', 'model.nope=1')
        assert code == 2
        assert 'key=model.nope' in capsys.readouterr().err

    def test_attn_viz(self, cli):
        code, run_dir = cli('attn-viz', '--layers', '0')
        assert code == 0
        with open(os.path.join(run_dir, 'attn', 'layer0.pgm'), 'rb') as f:
            assert f.read(2) == b'P5'
        rows = read_rows(os.path.join(run_dir, 'attn', 'attention.csv'))
        assert len(rows) == 16
        assert 0.0 < sum(float(r['value']) for r in rows) <= 1.0 + 1e-12

    def test_compress_bench(self, cli):
        code, run_dir = cli('compress-bench')
        assert code == 0
        rows = read_rows(os.path.join(run_dir, 'cost.csv'))
        assert list(rows[0]) == list(COST_COLUMNS)
        assert [r['variant'] for r in rows] == ['pip', 'pip', 'baseline']
        for row in rows:
            assert int(row['flops']) == int(row['measured_flops'])
        pip_full, pip_half, baseline = rows
        assert int(pip_half['llm_input_length']) < int(pip_full['llm_input_length'])
        assert int(baseline['bridge_flops']) == 0

    def test_bad_sample_index(self, cli, capsys):
        code, _ = cli('attn-viz', '--set', 'eval.sample=99')
        assert code == 1
        assert 'type=ContractError' in capsys.readouterr().err

    @pytest.mark.slow
    def test_sweep(self, cli):
        code, run_dir = cli('sweep-adapter-depth')
        assert code == 0
        rows = read_rows(os.path.join(run_dir, 'sweep.csv'))
        assert [r['adapter'] for r in rows] == ['linear', 'mlp1', 'mlp2', 'mlp3', 'mlp4', 'mlp5']
        counts = [int(r['param_count']) for r in rows]
        assert counts[1:] == sorted(counts[1:])

    @pytest.mark.slow
    def test_ab_compare(self, cli):
        code, run_dir = cli('ab-compare')
        assert code == 0
        rows = read_rows(os.path.join(run_dir, 'ab.csv'))
        assert list(rows[0]) == list(AB_COLUMNS)
        row = rows[0]
        assert int(row['wins']) + int(row['losses']) + int(row['ties']) == 4
        assert os.path.exists(os.path.join(run_dir, 'ab_report.md'))

    @pytest.mark.slow
    def test_grad_check(self, cli):
        code, run_dir = cli('grad-check')
        assert code == 0
        rows = read_rows(os.path.join(run_dir, 'gradcheck.csv'))
        assert all(r['passed'] == 'True' for r in rows)

    def test_repeat_runs_are_byte_identical(self, temp_dir, small_config_file,
                                            small_run_config):
        run_dirs = []
        for attempt in ('first', 'second'):
            out = os.path.join(temp_dir, attempt)
            for command in ('train', 'attn-viz'):
                assert main([command, '--config', small_config_file, '--out', out]) == 0
            run_dirs.append(os.path.join(out, small_run_config.run_name()))
        first, second = run_dirs
        heatmaps = sorted(f for f in os.listdir(os.path.join(first, 'attn')) if f.endswith('.pgm'))
        assert heatmaps == ['layer0.pgm']
        for name in ['model.ckpt', 'metrics.csv'] + [os.path.join('attn', f) for f in heatmaps]:
            with open(os.path.join(first, name), 'rb') as a, \
                    open(os.path.join(second, name), 'rb') as b:
                assert a.read() == b.read(), name
