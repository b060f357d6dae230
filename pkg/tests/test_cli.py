"""Tests for the command-line interface: exit codes, stream purity, determinism."""

import json

import pytest

from routebench.benchmark import CATEGORY_NAMES, load_dataset
from routebench.cli import build_parser, main
from routebench.datagen import CompletionResponse


def run_cli(capsys, argv):
    code = main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestParsing:
    def test_help_exits_zero(self, capsys):
        code, out, _ = run_cli(capsys, ["--help"])
        assert code == 0
        assert "route" in out and "gen-synth" in out

    def test_subcommand_help_exits_zero(self, capsys):
        code, out, _ = run_cli(capsys, ["eval", "--help"])
        assert code == 0
        assert "--dataset" in out

    def test_unknown_subcommand_exits_two(self, capsys):
        code, _, err = run_cli(capsys, ["frobnicate"])
        assert code == 2
        assert "frobnicate" in err

    def test_unknown_flag_exits_two(self, capsys):
        code, _, err = run_cli(capsys, ["gen-synth", "--per-category", "1", "--bogus"])
        assert code == 2
        assert "--bogus" in err

    def test_missing_required_flag_exits_two(self, capsys):
        code, _, err = run_cli(capsys, ["eval"])
        assert code == 2
        assert "--dataset" in err

    def test_bad_category_name_exits_two(self, capsys):
        code, _, err = run_cli(
            capsys, ["gen-synth", "--per-category", "1", "--categories", "Sizes"]
        )
        assert code == 2
        assert "Sizes" in err

    def test_parser_builds_eval_invocation(self):
        parser = build_parser()
        args = parser.parse_args(
            ["eval", "--dataset", "d.jsonl", "--pipeline", "p.json", "--scorer", "affinity"]
        )
        assert args.command == "eval"
        assert args.dataset == "d.jsonl"
        assert args.pipeline == "p.json"
        assert args.scorer == "affinity"


class TestGenSynth:
    def test_writes_dataset_file(self, capsys, tmp_path):
        out = tmp_path / "ds.jsonl"
        code, stdout, _ = run_cli(
            capsys, ["gen-synth", "--per-category", "5", "--seed", "7", "--out", str(out)]
        )
        assert code == 0
        assert stdout == ""  # data went to the file
        lines = out.read_text().splitlines()
        assert len(lines) == 50
        assert len(load_dataset(out)) == 50

    def test_stdout_is_pure_jsonl(self, capsys):
        code, stdout, stderr = run_cli(capsys, ["gen-synth", "--per-category", "1", "--seed", "3"])
        assert code == 0
        lines = stdout.splitlines()
        assert len(lines) == 10
        for line in lines:
            json.loads(line)
        assert "generated" in stderr  # logging goes to stderr only

    def test_seeded_runs_byte_identical(self, capsys):
        argv = ["gen-synth", "--per-category", "2", "--seed", "9"]
        _, first, _ = run_cli(capsys, argv)
        _, second, _ = run_cli(capsys, argv)
        assert first == second

    def test_category_subset(self, capsys):
        code, stdout, _ = run_cli(
            capsys,
            ["gen-synth", "--per-category", "3", "--categories", "Color,Counting"],
        )
        assert code == 0
        docs = [json.loads(line) for line in stdout.splitlines()]
        assert len(docs) == 6
        assert {d["category"] for d in docs} == {"Color", "Counting"}


class TestEval:
    @pytest.fixture()
    def dataset_path(self, capsys, tmp_path):
        path = tmp_path / "ds.jsonl"
        assert main(["gen-synth", "--per-category", "2", "--seed", "5", "--out", str(path)]) == 0
        capsys.readouterr()
        return path

    def test_oracle_scorer_zero_error(self, capsys, dataset_path, tmp_path):
        judgements = tmp_path / "judgements.jsonl"
        code, stdout, _ = run_cli(
            capsys,
            [
                "eval", "--dataset", str(dataset_path), "--scorer", "oracle",
                "--parallelism", "4", "--judgements", str(judgements),
            ],
        )
        assert code == 0
        doc = json.loads(stdout)
        assert doc["report"]["overall"]["error_rate"] == 0.0
        assert doc["report"]["overall"]["n"] == 20
        assert doc["failures"] == []
        assert len(judgements.read_text().splitlines()) == 20

    def test_negated_oracle_full_error(self, capsys, dataset_path):
        code, stdout, _ = run_cli(
            capsys,
            ["eval", "--dataset", str(dataset_path), "--scorer", "negated-oracle"],
        )
        assert code == 0
        assert json.loads(stdout)["report"]["overall"]["error_rate"] == 1.0

    def test_affinity_scorer_runs(self, capsys, dataset_path):
        code, stdout, _ = run_cli(
            capsys,
            ["eval", "--dataset", str(dataset_path), "--scorer", "affinity", "--favor",
             "color-histogram"],
        )
        assert code == 0
        doc = json.loads(stdout)
        assert set(doc["report"]["categories"]) == set(CATEGORY_NAMES)

    def test_missing_dataset_file_exits_one(self, capsys, tmp_path):
        code, _, err = run_cli(
            capsys, ["eval", "--dataset", str(tmp_path / "absent.jsonl"), "--scorer", "oracle"]
        )
        assert code == 1
        assert "absent.jsonl" in err

    def test_pipeline_and_favor_conflict_exits_two(self, capsys, dataset_path, tmp_path):
        code, _, err = run_cli(
            capsys,
            ["eval", "--dataset", str(dataset_path), "--pipeline", str(tmp_path / "p.json"),
             "--favor", "edge-shape"],
        )
        assert code == 2
        assert "mutually exclusive" in err


class TestRoute:
    def test_scene_route_deterministic(self, capsys):
        argv = ["route", "--scene-seed", "3", "--seed", "1"]
        code, first, _ = run_cli(capsys, argv)
        assert code == 0
        _, second, _ = run_cli(capsys, argv)
        assert first == second
        doc = json.loads(first)
        weights = doc["routing"]["weights"]
        assert len(weights) == 6
        assert sum(weights) == pytest.approx(1.0, abs=1e-9)
        assert doc["features"]["tokens"] == 64

    def test_favor_shifts_routing(self, capsys):
        _, uniform, _ = run_cli(capsys, ["route", "--scene-seed", "3"])
        _, favored, _ = run_cli(
            capsys, ["route", "--scene-seed", "3", "--favor", "color-histogram"]
        )
        assert json.loads(favored)["routing"]["weights"][1] > 0.99
        assert json.loads(uniform)["routing"]["weights"][1] == pytest.approx(1 / 6, abs=1e-9)

    def test_requires_an_image_source(self, capsys):
        code, _, err = run_cli(capsys, ["route"])
        assert code == 2
        assert "--image or --scene-seed" in err

    def test_unknown_persona_exits_two(self, capsys):
        code, _, err = run_cli(capsys, ["route", "--scene-seed", "1", "--favor", "bogus"])
        assert code == 2
        assert "bogus" in err


class TestMetrics:
    def test_combined_metrics_and_avg(self, capsys, tmp_path):
        pope = tmp_path / "pope.jsonl"
        pope.write_text(
            '{"pred": "yes", "label": "yes"}\n{"pred": "no", "label": "yes"}\n'
            '{"pred": "no", "label": "no"}\n{"pred": "no", "label": "no"}\n'
        )
        ah = tmp_path / "ah.jsonl"
        ah.write_text(
            '{"scenario": "synthetic", "correct": true}\n'
            '{"scenario": "synthetic", "correct": false}\n'
            '{"scenario": "real", "correct": true}\n{"scenario": "real", "correct": true}\n'
        )
        code, stdout, _ = run_cli(
            capsys, ["metrics", "--pope", str(pope), "--autohallusion", str(ah)]
        )
        assert code == 0
        doc = json.loads(stdout)
        assert doc["pope"]["f1"] == pytest.approx(200.0 / 3.0, abs=1e-9)
        assert doc["autohallusion"]["overall"] == pytest.approx(75.0)
        assert doc["avg"] == pytest.approx((200.0 / 3.0 + 75.0) / 2.0, abs=1e-9)

    def test_requires_at_least_one_input(self, capsys):
        code, _, err = run_cli(capsys, ["metrics"])
        assert code == 2
        assert "--pope" in err

    def test_single_input_no_avg(self, capsys, tmp_path):
        pope = tmp_path / "pope.jsonl"
        pope.write_text('{"pred": "yes", "label": "yes"}\n')
        code, stdout, _ = run_cli(capsys, ["metrics", "--pope", str(pope)])
        assert code == 0
        doc = json.loads(stdout)
        assert "avg" not in doc and "autohallusion" not in doc


class TestGradcheckAndBench:
    def test_gradcheck_passes(self, capsys):
        code, stdout, _ = run_cli(capsys, ["gradcheck", "--configs", "2", "--seed", "4"])
        assert code == 0
        doc = json.loads(stdout)
        assert doc["all_passed"] is True
        assert len(doc["configs"]) == 2
        names = {p["parameter_name"] for c in doc["configs"] for p in c["parameters"]}
        assert "router.weights" in names

    def test_bench_single_strategy(self, capsys):
        code, stdout, _ = run_cli(capsys, ["bench", "--strategy", "add", "--repeats", "3"])
        assert code == 0
        (report,) = json.loads(stdout)["reports"]
        assert report["strategy"] == "add"
        assert report["repeats"] == 3
        assert set(report["per_stage_ms"]) == {"encode", "align", "route", "fuse", "project"}

    def test_bench_all_strategies(self, capsys):
        code, stdout, _ = run_cli(capsys, ["bench", "--repeats", "3"])
        assert code == 0
        kinds = [r["strategy"] for r in json.loads(stdout)["reports"]]
        assert kinds == ["routed", "add", "concat"]

    def test_bench_rejects_too_few_repeats(self, capsys):
        code, _, err = run_cli(capsys, ["bench", "--repeats", "2"])
        assert code == 1
        assert "repeats" in err


class TestReport:
    def make_judgements(self, capsys, tmp_path, name, favor=None):
        ds = tmp_path / "color.jsonl"
        if not ds.exists():
            assert main(
                ["gen-synth", "--per-category", "3", "--seed", "11", "--categories", "Color",
                 "--out", str(ds)]
            ) == 0
        path = tmp_path / f"{name}.jsonl"
        argv = ["eval", "--dataset", str(ds), "--scorer", "affinity",
                "--judgements", str(path), "--out", str(tmp_path / f"{name}-report.json")]
        if favor:
            argv += ["--favor", favor]
        assert main(argv) == 0
        capsys.readouterr()
        return path

    def test_radar_csv_two_runs(self, capsys, tmp_path):
        uniform = self.make_judgements(capsys, tmp_path, "uniform")
        routed = self.make_judgements(capsys, tmp_path, "routed", favor="color-histogram")
        code, stdout, _ = run_cli(
            capsys,
            ["report", "--judgements", str(uniform), str(routed), "--names", "uniform,routed"],
        )
        assert code == 0
        lines = stdout.splitlines()
        assert lines[0] == "category,run,error_rate,normalized"
        assert len(lines) == 1 + 2 * 10
        assert any(line.startswith("Color,uniform,") for line in lines)

    def test_default_names_are_stems(self, capsys, tmp_path):
        uniform = self.make_judgements(capsys, tmp_path, "uniform")
        code, stdout, _ = run_cli(capsys, ["report", "--judgements", str(uniform)])
        assert code == 0
        assert "Color,uniform," in stdout

    def test_name_count_mismatch_exits_two(self, capsys, tmp_path):
        uniform = self.make_judgements(capsys, tmp_path, "uniform")
        code, _, err = run_cli(
            capsys, ["report", "--judgements", str(uniform), "--names", "a,b"]
        )
        assert code == 2
        assert "name(s)" in err


class TestGenLlm:
    def test_mocked_generation(self, capsys, tmp_path, monkeypatch):
        import routebench.cli as cli_module

        class FakeClient:
            def __init__(self, config):
                self.config = config

            def complete(self, request):
                caption = request.prompt.rstrip("\n").splitlines()[-1]
                caption = caption[len("Caption: "):]
                return CompletionResponse(text=caption + " Altered.")

        monkeypatch.setattr(cli_module, "HttpChatClient", FakeClient)
        items = tmp_path / "items.jsonl"
        items.write_text(
            '{"image": {"kind": "file", "path": "imgs/1.raw"}, "caption": "A red circle sits."}\n'
        )
        config = tmp_path / "datagen.json"
        config.write_text(json.dumps({"endpoint": "https://api.test.invalid", "model": "m"}))
        code, stdout, _ = run_cli(
            capsys,
            ["gen-llm", "--items", str(items), "--config", str(config),
             "--categories", "Color,Action"],
        )
        assert code == 0
        docs = [json.loads(line) for line in stdout.splitlines()]
        assert [d["category"] for d in docs] == ["Color", "Action"]
        assert all(d["hallucinated"].endswith("Altered.") for d in docs)

    def test_missing_config_exits_one(self, capsys, tmp_path):
        items = tmp_path / "items.jsonl"
        items.write_text(
            '{"image": {"kind": "file", "path": "imgs/1.raw"}, "caption": "A red circle sits."}\n'
        )
        code, _, err = run_cli(
            capsys,
            ["gen-llm", "--items", str(items), "--config", str(tmp_path / "absent.json")],
        )
        assert code == 1
