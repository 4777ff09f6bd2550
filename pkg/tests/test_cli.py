import csv

import numpy as np
import pytest

import main as entry
from config import PipelineConfig
from main import cmd_simulate, main
from pointcloud import PointCloud

SCENE = ['bench.n_points=3000', 'bench.n_views=3', 'bench.image_height=64', 'bench.image_width=128',
         'bench.noise_sigma=0', 'bench.rot_deg=1', 'bench.trans_cm=2', 'run.seed=7']
QUICK = ['--threads', '1', '--set', 'optimizer.max_outer=2', '--set', 'optimizer.pyramid_levels=2']


@pytest.fixture(scope='module')
def dataset_dir(tmp_path_factory):
    directory = tmp_path_factory.mktemp('cli') / 'scene'
    cmd_simulate(PipelineConfig.load(None, SCENE), directory)
    return directory


def _sets(values):
    return [arg for value in values for arg in ('--set', value)]


class TestConfigCommand:
    def test_prints_resolved_configuration(self, capsys):
        assert main(['config', '--set', 'optimizer.max_outer=7']) == 0
        out = capsys.readouterr().out
        assert 'optimizer.max_outer = 7' in out
        assert '# outer alternation iterations per pyramid level' in out

    def test_unknown_key(self, capsys):
        assert main(['config', '--set', 'optimizer.bogus=1']) == 2
        assert 'optimizer.bogus' in capsys.readouterr().err


class TestFailures:
    def test_missing_cloud(self, tmp_path, capsys):
        missing = tmp_path / 'nowhere'
        assert main(['colorize', str(missing), '--output', str(tmp_path / 'out')]) == 3
        assert str(missing) in capsys.readouterr().err

    def test_nothing_to_evaluate(self, tmp_path, capsys):
        assert main(['evaluate', '--output', str(tmp_path)]) == 2
        assert 'Nothing to evaluate' in capsys.readouterr().err

    def test_inconsistent_cloud_is_an_input_error(self, tmp_path, monkeypatch, capsys):
        def mismatched(config):
            return PointCloud(np.zeros((3, 3)), np.zeros((2, 3)))

        monkeypatch.setattr(entry, 'load_dataset', mismatched)
        assert main(['colorize', str(tmp_path), '--output', str(tmp_path / 'out')]) == 3
        assert 'colors has 6 values' in capsys.readouterr().err


class TestEndToEnd:
    def test_simulate_command(self, tmp_path, capsys):
        assert main(['simulate', str(tmp_path / 'sim'), *_sets(SCENE)]) == 0
        assert 'Wrote 3 panoramas and 3000 points' in capsys.readouterr().out
        manifest = tmp_path / 'sim' / 'manifest.txt'
        assert manifest.read_text().startswith('# panocolor ')
        assert PipelineConfig.load(manifest).paths.dataset == str(tmp_path / 'sim')

    def test_colorize_is_repeatable(self, dataset_dir, tmp_path):
        runs = []
        for name in ('first', 'second'):
            output = tmp_path / name
            assert main(['colorize', str(dataset_dir), '--output', str(output), *QUICK]) == 0
            runs.append(output)
        for name in ('colored.ply', 'colored_initial.ply', 'optimized_poses.txt'):
            assert (runs[0] / name).read_bytes() == (runs[1] / name).read_bytes(), name
        first = PipelineConfig.load(runs[0] / 'manifest.txt')
        second = PipelineConfig.load(runs[1] / 'manifest.txt')
        assert first.paths.output == str(runs[0])
        assert first.with_overrides(paths__output='').items() == second.with_overrides(paths__output='').items()
        assert first.optimizer.max_outer == 2 and first.run.threads == 1

    def test_manifest_reruns_as_config(self, dataset_dir, tmp_path):
        assert main(['optimize', str(dataset_dir), '--output', str(tmp_path / 'a'), *QUICK]) == 0
        assert main(['optimize', '--config', str(tmp_path / 'a' / 'manifest.txt'),
                     '--output', str(tmp_path / 'b')]) == 0
        assert (tmp_path / 'a' / 'optimized_poses.txt').read_bytes() == \
            (tmp_path / 'b' / 'optimized_poses.txt').read_bytes()
        assert not (tmp_path / 'b' / 'colored.ply').exists()

    def test_evaluate_estimate(self, dataset_dir, tmp_path, capsys):
        output = tmp_path / 'run'
        assert main(['optimize', str(dataset_dir), '--output', str(output), *QUICK]) == 0
        assert main(['evaluate', '--estimate', str(output / 'optimized_poses.txt'),
                     '--ground-truth', str(dataset_dir / 'ground_truth.txt'), '--output', str(output)]) == 0
        assert 'Mean pose error' in capsys.readouterr().out
        rows = list(csv.reader(open(output / 'pose_errors.csv')))
        assert rows[0] == ['frame', 'timestamp', 'rotation_deg', 'translation_cm']
        assert rows[-1][0] == 'mean'
        assert len(rows) >= 4
