"""Tests for CLI functionality."""

import json
import pickle

import pytest
import torch
from click.testing import CliRunner

from promptpert import __version__
from promptpert.cli.main import cli
from promptpert.cli.utils import handle_errors, slug
from promptpert.core.checkpoint import load_checkpoint
from promptpert.core.data import read_image, write_image
from promptpert.utils.exceptions import ArgumentError


def toy_config(output_dir, **sections):
    """A desk-sized run: 4 shape classes at 16px, narrow generator, 2 steps."""
    surrogate = {"name": "surrogate", "width": 4, "epochs": 1, "batch_size": 8}
    config = {
        "data": {"train": {"num_classes": 4, "samples_per_class": 4, "image_size": 16}},
        "generator": {"base_width": 8, "n_residual_blocks": 1, "attention_width": 8},
        "train": {"epochs": 1, "batch_size": 4, "max_steps": 2, "surrogate": surrogate},
        "finetune": {"epochs": 1, "batch_size": 4, "max_steps": 1, "patch_size": 4},
        "eval": {"victims": [surrogate], "batch_size": 8},
        "logging": {"level": "WARNING", "use_rich": False},
        "output_dir": str(output_dir),
    }
    config.update(sections)
    return config


def write_config(path, config):
    path.write_text(json.dumps(config))
    return path


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    """Train once and share the run directory across the module."""
    root = tmp_path_factory.mktemp("toy")
    config = write_config(root / "toy.json", toy_config(root / "run"))
    result = CliRunner().invoke(cli, ["train", str(config)])
    assert result.exit_code == 0, result.output
    return root, config


class TestCLI:
    """Test CLI command functionality."""

    def setup_method(self):
        self.runner = CliRunner()

    def test_version_command(self):
        result = self.runner.invoke(cli, ["--version"])
        assert result.exit_code == 0
        assert __version__ in result.output

    def test_help_command(self):
        result = self.runner.invoke(cli, ["--help"])
        assert result.exit_code == 0
        assert "Commands:" in result.output
        for command in ("train", "finetune", "attack", "evaluate", "report", "visualize"):
            assert command in result.output

    def test_train_without_epochs_is_a_usage_error(self, tmp_path):
        config = toy_config(tmp_path / "run")
        del config["train"]["epochs"]
        result = self.runner.invoke(cli, ["train", str(write_config(tmp_path / "c.json", config))])
        assert result.exit_code == 2
        assert "train.epochs" in result.output

    def test_unknown_key_is_a_usage_error(self, tmp_path):
        config = toy_config(tmp_path / "run", bogus=1)
        result = self.runner.invoke(cli, ["train", str(write_config(tmp_path / "c.json", config))])
        assert result.exit_code == 2
        assert "bogus" in result.output

    def test_missing_config_file(self, tmp_path):
        result = self.runner.invoke(cli, ["train", str(tmp_path / "absent.json")])
        assert result.exit_code == 2


class TestTrainAndFinetune:
    def setup_method(self):
        self.runner = CliRunner()

    def test_train_outputs(self, toy_run):
        root, _ = toy_run
        run = root / "run"
        assert (run / "checkpoint.zip").exists()
        assert len((run / "metrics.jsonl").read_text().splitlines()) == 2
        snapshot = json.loads((run / "resolved_config.json").read_text())
        assert snapshot["command"] == "train"
        assert snapshot["config"]["train"]["epochs"] == 1

    def test_finetune_defaults(self, toy_run):
        root, config = toy_run
        name = load_checkpoint(root / "run" / "checkpoint.zip").target_classes.names[0]
        result = self.runner.invoke(cli, ["finetune", str(config), "--class", name])
        assert result.exit_code == 0, result.output
        outputs = list((root / "run").glob("checkpoint-*.zip"))
        assert outputs
        ckpt = load_checkpoint(outputs[0])
        assert ckpt.finetune["mask_ratio"] == pytest.approx(0.2)
        assert ckpt.finetune["epochs"] == 1

    def test_finetune_without_mask(self, toy_run, tmp_path):
        root, config = toy_run
        name = load_checkpoint(root / "run" / "checkpoint.zip").target_classes.names[1]
        output = tmp_path / "plain.zip"
        result = self.runner.invoke(
            cli,
            ["finetune", str(config), "--class", name, "--mask-ratio", "0", "--output", str(output)],
        )
        assert result.exit_code == 0, result.output
        assert load_checkpoint(output).finetune["mode"] == "plain"

    def test_finetune_rerun_replaces_metrics(self, toy_run, tmp_path):
        root, config = toy_run
        name = load_checkpoint(root / "run" / "checkpoint.zip").target_classes.names[2]
        metrics = root / "run" / f"metrics-{slug(name)}.jsonl"
        counts = []
        for _ in range(2):
            result = self.runner.invoke(
                cli, ["finetune", str(config), "--class", name, "--output", str(tmp_path / "ft.zip")]
            )
            assert result.exit_code == 0, result.output
            counts.append(len(metrics.read_text().splitlines()))
        assert counts[0] > 0
        assert counts[0] == counts[1]

    def test_finetune_unknown_class(self, toy_run, tmp_path):
        _, config = toy_run
        result = self.runner.invoke(
            cli, ["finetune", str(config), "--class", "bogus", "--output", str(tmp_path / "x.zip")]
        )
        assert result.exit_code == 2
        assert "bogus" in result.output


class TestAttack:
    def setup_method(self):
        self.runner = CliRunner()

    def _image(self, tmp_path, size=16):
        gen = torch.Generator().manual_seed(3)
        return write_image(torch.rand(3, size, size, generator=gen), tmp_path / "cat.png")

    def _target(self, root):
        return load_checkpoint(root / "run" / "checkpoint.zip").target_classes.names[0]

    def test_zero_epsilon_leaves_pixels_identical(self, toy_run, tmp_path):
        root, _ = toy_run
        image = self._image(tmp_path)
        out = tmp_path / "adv"
        result = self.runner.invoke(
            cli,
            [
                "attack", str(root / "run" / "checkpoint.zip"), str(image),
                "--target", self._target(root), "--epsilon", "0", "--output-dir", str(out),
            ],
        )
        assert result.exit_code == 0, result.output
        adversarial = list(out.glob("cat-*-adv.png"))
        assert len(adversarial) == 1
        assert torch.equal(read_image(adversarial[0]), read_image(image))
        assert list(out.glob("cat-*-delta.png"))

    def test_perturbation_stays_in_budget(self, toy_run, tmp_path):
        root, _ = toy_run
        image = self._image(tmp_path)
        out = tmp_path / "adv"
        result = self.runner.invoke(
            cli,
            [
                "attack", str(root / "run" / "checkpoint.zip"), str(image),
                "--target", self._target(root), "--epsilon", "0.05", "--output-dir", str(out),
            ],
        )
        assert result.exit_code == 0, result.output
        adversarial = read_image(next(out.glob("cat-*-adv.png")))
        # One 8-bit quantization step on top of the budget.
        assert (adversarial - read_image(image)).abs().max() <= 0.05 + 1 / 255 + 1e-6

    def test_undecodable_image(self, toy_run, tmp_path):
        root, _ = toy_run
        bad = tmp_path / "bad.png"
        bad.write_text("not an image")
        result = self.runner.invoke(
            cli,
            ["attack", str(root / "run" / "checkpoint.zip"), str(bad), "--target", self._target(root)],
        )
        assert result.exit_code == 1

    def test_unknown_target(self, toy_run, tmp_path):
        root, _ = toy_run
        result = self.runner.invoke(
            cli,
            ["attack", str(root / "run" / "checkpoint.zip"), str(self._image(tmp_path)), "--target", "bogus"],
        )
        assert result.exit_code == 2

    def test_visualize_grid(self, toy_run, tmp_path):
        root, _ = toy_run
        output = tmp_path / "grid.png"
        result = self.runner.invoke(
            cli,
            [
                "visualize", str(root / "run" / "checkpoint.zip"), str(self._image(tmp_path)),
                "--target", self._target(root), "--output", str(output),
            ],
        )
        assert result.exit_code == 0, result.output
        assert read_image(output).shape == (3, 16, 32)


class TestEvaluateAndReport:
    def setup_method(self):
        self.runner = CliRunner()

    def test_zero_victims_is_a_usage_error(self, toy_run, tmp_path):
        root, _ = toy_run
        config = toy_config(tmp_path / "eval")
        config["eval"]["victims"] = []
        path = write_config(tmp_path / "c.json", config)
        result = self.runner.invoke(cli, ["evaluate", str(root / "run" / "checkpoint.zip"), str(path)])
        assert result.exit_code == 2
        assert "eval.victims" in result.output

    def test_zero_jobs_is_a_usage_error(self, toy_run, tmp_path):
        root, _ = toy_run
        path = write_config(tmp_path / "c.json", toy_config(tmp_path / "eval"))
        result = self.runner.invoke(
            cli, ["evaluate", str(root / "run" / "checkpoint.zip"), str(path), "--n-jobs", "0"]
        )
        assert result.exit_code == 2
        assert "eval.n_jobs" in result.output

    def test_evaluate_then_report(self, toy_run, tmp_path):
        root, _ = toy_run
        config = toy_config(
            tmp_path / "eval",
            eval={
                "victims": [{"name": "surrogate", "width": 4, "epochs": 1, "batch_size": 8}],
                "defenses": [{"kind": "none"}, {"kind": "jpeg", "quality": 90}],
                "batch_size": 8,
            },
        )
        path = write_config(tmp_path / "c.json", config)
        result = self.runner.invoke(cli, ["evaluate", str(root / "run" / "checkpoint.zip"), str(path)])
        assert result.exit_code == 0, result.output

        report = json.loads((tmp_path / "eval" / "report.json").read_text())
        assert len(report["rows"]) == 4 * 2
        assert all(row["white_box"] for row in report["rows"])
        assert (tmp_path / "eval" / "report.csv").exists()

        csv_path = tmp_path / "again.csv"
        result = self.runner.invoke(
            cli, ["report", str(tmp_path / "eval" / "report.json"), "--csv", str(csv_path)]
        )
        assert result.exit_code == 0, result.output
        assert "surrogate*" in result.output
        assert csv_path.read_text() == (tmp_path / "eval" / "report.csv").read_text()

    def test_report_of_garbage(self, tmp_path):
        path = tmp_path / "report.json"
        path.write_text("[]")
        result = self.runner.invoke(cli, ["report", str(path)])
        assert result.exit_code == 2


class TestHandleErrors:
    @pytest.mark.parametrize(
        "exc,code",
        [
            (ArgumentError("bad flag"), 2),
            (ValueError("bad value"), 1),
            (pickle.UnpicklingError("truncated weights"), 1),
            (OSError("disk full"), 1),
        ],
    )
    def test_exit_codes(self, exc, code):
        @handle_errors
        def failing():
            raise exc

        with pytest.raises(SystemExit) as excinfo:
            failing()
        assert excinfo.value.code == code
