"""Config schema validation, subcommand plumbing, and process exit codes.

Everything runs ``main()`` in process; stdout/stderr are captured with
capsys so the assertions see exactly what a shell user would.
"""

import json
import re

import pytest

from qatlab.cli import (
    REFERENCE_SHAPES,
    build_model_from_config,
    load_config,
    main,
    train_config_from,
    validate_config,
)
from qatlab.errors import ConfigError
from qatlab.quantize import QuantizerKind


def base_config(**tweaks):
    cfg = {
        "seed": 0,
        "model": {
            "input_shape": [8],
            "layers": [{"kind": "dense", "out": 8}, {"kind": "relu"},
                       {"kind": "dense", "out": 4}],
        },
        "data": {
            "train": {"kind": "gaussian-blobs", "samples": 64, "classes": 4,
                      "features": 8},
            "val": {"kind": "gaussian-blobs", "samples": 32, "classes": 4,
                    "features": 8},
        },
        "train": {"epochs": 2, "batch_size": 32, "lr": 0.05},
        "schedule": {"interval": 1, "alpha": 0.99, "gamma_target": 0.21875},
    }
    cfg.update(tweaks)
    return cfg


def write_config(tmp_path, cfg, name="run.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg), encoding="utf-8")
    return str(p)


class TestValidateConfig:
    def test_minimal_config_fills_defaults(self):
        norm = validate_config({
            "seed": 3,
            "model": {"input_shape": [8],
                      "layers": [{"kind": "dense", "out": 4}]},
            "data": {
                "train": {"kind": "gaussian-blobs", "samples": 16},
                "val": {"kind": "gaussian-blobs", "samples": 16},
            },
            "train": {"epochs": 1},
        })
        assert norm["model"]["quantized"] is True
        assert norm["model"]["quantizer"] == "roundclamp"
        assert norm["model"]["first_last"] == "quantize"
        assert norm["train"]["batch_size"] == 128
        assert norm["train"]["lr"] == 0.05
        assert norm["train"]["warmup_epochs"] == 0
        assert norm["train"]["momentum"] == 0.9
        assert norm["train"]["a_bits"] is None
        assert norm["train"]["act_clip"] == 1.0
        assert norm["schedule"] == {
            "lambda": 5e-5, "interval": 20, "alpha": 0.3,
            "gamma_target": 1.0, "deadline": None, "min_bits": 1,
            "hessian_aware": True,
        }
        assert norm["hessian"] == {"samples": 8, "batch_size": 512,
                                   "eps": 1e-3}

    def test_explicit_values_survive(self):
        cfg = base_config()
        cfg["schedule"]["lambda"] = 1e-3
        cfg["schedule"]["min_bits"] = 2
        cfg["train"]["a_bits"] = 4
        norm = validate_config(cfg)
        assert norm["schedule"]["lambda"] == 1e-3
        assert norm["schedule"]["min_bits"] == 2
        assert norm["schedule"]["gamma_target"] == 0.21875
        assert norm["train"]["a_bits"] == 4

    @pytest.mark.parametrize("mutate, path", [
        (lambda c: c.update(frobnicate=1), "'frobnicate'"),
        (lambda c: c["model"].update(depth=3), "'model.depth'"),
        (lambda c: c["model"]["layers"][1].update(stride=2),
         "'model.layers[1].stride'"),
        (lambda c: c["data"]["train"].update(noise=0.1),
         "'data.train.noise'"),
        (lambda c: c["data"].update(test={"kind": "gaussian-blobs"}),
         "'data.test'"),
        (lambda c: c["train"].update(weight_decay=0.0),
         "'train.weight_decay'"),
        (lambda c: c["schedule"].update(beta=0.5), "'schedule.beta'"),
        (lambda c: c.update(hessian={"probes": 4}), "'hessian.probes'"),
    ])
    def test_unknown_keys_report_their_full_path(self, mutate, path):
        cfg = base_config()
        mutate(cfg)
        with pytest.raises(ConfigError, match=re.escape(
                f"unrecognized config key {path}")):
            validate_config(cfg)

    @pytest.mark.parametrize("drop, path", [
        (lambda c: c.pop("seed"), "'seed'"),
        (lambda c: c.pop("model"), "'model'"),
        (lambda c: c["model"].pop("input_shape"), "'model.input_shape'"),
        (lambda c: c["model"].pop("layers"), "'model.layers'"),
        (lambda c: c["model"]["layers"][0].pop("kind"),
         "'model.layers[0].kind'"),
        (lambda c: c.pop("data"), "'data'"),
        (lambda c: c["data"].pop("val"), "'data.val'"),
        (lambda c: c["data"]["train"].pop("kind"), "'data.train.kind'"),
        (lambda c: c["data"]["train"].pop("samples"),
         "'data.train.samples'"),
        (lambda c: c.pop("train"), "'train'"),
        (lambda c: c["train"].pop("epochs"), "'train.epochs'"),
    ])
    def test_missing_keys_report_their_full_path(self, drop, path):
        cfg = base_config()
        drop(cfg)
        with pytest.raises(ConfigError, match=re.escape(
                f"missing required config key {path}")):
            validate_config(cfg)

    def test_mnist_kind_requires_both_idx_paths(self):
        cfg = base_config()
        cfg["data"]["train"] = {"kind": "mnist-idx", "images": "x"}
        with pytest.raises(ConfigError,
                           match=r"missing.*'data\.train\.labels'"):
            validate_config(cfg)

    @pytest.mark.parametrize("seed", [True, -1, "0", 1.5, None])
    def test_bad_seed_rejected(self, seed):
        with pytest.raises(ConfigError, match="non-negative integer"):
            validate_config(base_config(seed=seed))

    @pytest.mark.parametrize("shape", [8, [], [0], [8.0], ["a"], [4, -1]])
    def test_bad_input_shape_rejected(self, shape):
        cfg = base_config()
        cfg["model"]["input_shape"] = shape
        with pytest.raises(ConfigError, match="positive integers"):
            validate_config(cfg)

    @pytest.mark.parametrize("layers, msg", [
        ({}, "non-empty list"),
        ([], "non-empty list"),
        ([{"kind": "dense", "out": 4}, 3],
         r"section 'model\.layers\[1\]' must be an object"),
    ])
    def test_bad_layers_rejected(self, layers, msg):
        cfg = base_config()
        cfg["model"]["layers"] = layers
        with pytest.raises(ConfigError, match=msg):
            validate_config(cfg)

    def test_unknown_dataset_kind_lists_the_options(self):
        cfg = base_config()
        cfg["data"]["val"]["kind"] = "mnist"
        with pytest.raises(ConfigError) as exc:
            validate_config(cfg)
        msg = str(exc.value)
        assert "'data.val.kind'" in msg
        for name in ("gaussian-blobs", "mnist-idx", "synthetic-digits",
                     "two-spirals"):
            assert name in msg

    def test_non_object_section_rejected(self):
        with pytest.raises(ConfigError,
                           match="section 'train' must be an object"):
            validate_config(base_config(train=5))

    def test_non_object_config_rejected(self):
        with pytest.raises(ConfigError, match="must be an object"):
            validate_config([1, 2])


class TestLoadConfig:
    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "absent.json")

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "broken.json"
        p.write_text("{not json", encoding="utf-8")
        with pytest.raises(ConfigError, match="not valid JSON"):
            load_config(p)

    def test_returns_raw_and_normalized(self, tmp_path):
        cfg = base_config()
        raw, norm = load_config(write_config(tmp_path, cfg))
        assert raw == cfg
        assert norm == validate_config(cfg)


class TestBuilders:
    def test_model_built_from_config(self):
        norm = validate_config(base_config())
        model = build_model_from_config(norm)
        assert model.weight_counts() == [64, 32]
        assert all(s.kind is QuantizerKind.ROUND_CLAMP
                   for s in model.quant_states())

    def test_quantizer_kind_flows_through(self):
        cfg = base_config()
        cfg["model"]["quantizer"] = "dorefa"
        model = build_model_from_config(validate_config(cfg))
        assert all(s.kind is QuantizerKind.DOREFA
                   for s in model.quant_states())

    def test_bad_quantizer_name(self):
        cfg = base_config()
        cfg["model"]["quantizer"] = "linear"
        with pytest.raises(ConfigError, match="'linear'"):
            build_model_from_config(validate_config(cfg))

    def test_min_bits_becomes_the_layer_floor(self):
        cfg = base_config()
        cfg["schedule"]["min_bits"] = 3
        model = build_model_from_config(validate_config(cfg))
        assert [s.floor_bits for s in model.quant_states()] == [3, 3]

    def test_train_config_carries_the_schedule(self):
        norm = validate_config(base_config())
        tc = train_config_from(norm)
        assert tc.epochs == 2
        assert tc.batch_size == 32
        assert tc.lr == 0.05
        assert tc.seed == 0
        assert tc.schedule.interval == 1
        assert tc.schedule.alpha == 0.99
        assert tc.schedule.gamma_target == 0.21875
        assert tc.hessian_samples == 8
        assert tc.hessian_batch == 512


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One tiny end-to-end train shared by the artifact tests."""
    root = tmp_path_factory.mktemp("cli_train")
    cfg_path = root / "run.json"
    cfg_path.write_text(json.dumps(base_config()), encoding="utf-8")
    out = root / "out"
    rc = main(["train", "--config", str(cfg_path), "--out-dir", str(out)])
    assert rc == 0
    return {"config": str(cfg_path), "out": out}


class TestTrainCommand:
    def test_writes_every_artifact(self, trained):
        out = trained["out"]
        for name in ("report.json", "metrics.csv", "checkpoint.bin",
                     "scheme.csv", "weight_histograms.csv",
                     "sensitivity.csv"):
            assert (out / name).is_file(), name

    def test_renders_figures_next_to_the_tables(self, trained):
        figs = trained["out"] / "figures"
        for name in ("training_curves.png", "bit_scheme.png",
                     "sensitivity.png", "weight_histograms.png"):
            p = figs / name
            assert p.is_file(), name
            assert p.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_report_embeds_both_config_forms(self, trained):
        rep = json.loads((trained["out"] / "report.json").read_text())
        raw, norm = load_config(trained["config"])
        assert rep["config"]["raw"] == raw
        assert rep["config"]["resolved"] == norm

    def test_metrics_csv_header(self, trained):
        first = (trained["out"] / "metrics.csv").read_text().splitlines()[0]
        assert first == "epoch,train_loss,reg_loss,val_acc,gamma,bits_l0,bits_l1"

    def test_stdout_summary_lines(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, base_config())
        rc = main(["train", "--config", cfg_path,
                   "--out-dir", str(tmp_path / "out"), "--no-figures"])
        assert rc == 0
        lines = capsys.readouterr().out.strip().splitlines()
        keys = [l.split(",", 1)[0] for l in lines]
        assert keys == ["final_val_acc", "size_fraction",
                        "compression_ratio", "phase", "events", "out_dir"]
        fields = dict(l.split(",", 1) for l in lines)
        assert float(fields["size_fraction"]) == 0.21875
        assert fields["phase"] == "finetune"
        assert int(fields["events"]) == 2
        assert not (tmp_path / "out" / "figures").exists()

    def test_same_config_same_bytes(self, trained, tmp_path):
        rc = main(["train", "--config", trained["config"],
                   "--out-dir", str(tmp_path / "again"), "--no-figures"])
        assert rc == 0
        for name in ("metrics.csv", "scheme.csv", "checkpoint.bin"):
            a = (trained["out"] / name).read_bytes()
            b = (tmp_path / "again" / name).read_bytes()
            assert a == b, name

    def test_feature_mismatch_is_a_config_error(self, tmp_path, capsys):
        cfg = base_config()
        cfg["data"]["train"]["features"] = 16
        rc = main(["train", "--config", write_config(tmp_path, cfg),
                   "--out-dir", str(tmp_path / "out")])
        assert rc == 1
        err = capsys.readouterr().err
        assert "config error:" in err
        assert "8 features" in err and "16" in err

    def test_class_overflow_is_a_config_error(self, tmp_path, capsys):
        cfg = base_config()
        for split in ("train", "val"):
            cfg["data"][split]["classes"] = 5
        rc = main(["train", "--config", write_config(tmp_path, cfg),
                   "--out-dir", str(tmp_path / "out")])
        assert rc == 1
        assert "4 logits" in capsys.readouterr().err


class TestEvalCommand:
    def test_matches_the_training_report(self, trained, capsys):
        rc = main(["eval", "--checkpoint",
                   str(trained["out"] / "checkpoint.bin"),
                   "--config", trained["config"]])
        assert rc == 0
        fields = dict(l.split(",", 1)
                      for l in capsys.readouterr().out.strip().splitlines())
        assert fields["split"] == "val"
        assert fields["samples"] == "32"
        rep = json.loads((trained["out"] / "report.json").read_text())
        assert float(fields["accuracy"]) == rep["final_val_acc"]

    def test_train_split_scores_more_samples(self, trained, capsys):
        rc = main(["eval", "--checkpoint",
                   str(trained["out"] / "checkpoint.bin"),
                   "--config", trained["config"], "--split", "train"])
        assert rc == 0
        fields = dict(l.split(",", 1)
                      for l in capsys.readouterr().out.strip().splitlines())
        assert fields["split"] == "train"
        assert fields["samples"] == "64"


class TestSchemeCommand:
    def test_from_checkpoint(self, trained, capsys):
        rc = main(["scheme", "--checkpoint",
                   str(trained["out"] / "checkpoint.bin")])
        assert rc == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "layer,bits,weights"
        assert lines[1] == "0,7,64"
        assert lines[2] == "1,7,32"
        assert lines[3] == "size_fraction,0.21875"

    def test_from_report_agrees(self, trained, capsys):
        main(["scheme", "--checkpoint",
              str(trained["out"] / "checkpoint.bin")])
        from_ckpt = capsys.readouterr().out
        rc = main(["scheme", "--report",
                   str(trained["out"] / "report.json")])
        assert rc == 0
        assert capsys.readouterr().out == from_ckpt

    def test_out_flag_writes_the_csv(self, trained, tmp_path):
        dest = tmp_path / "scheme.csv"
        rc = main(["scheme", "--checkpoint",
                   str(trained["out"] / "checkpoint.bin"),
                   "--out", str(dest)])
        assert rc == 0
        assert dest.read_text().splitlines()[0] == "layer,bits,weights"

    @pytest.mark.parametrize("extra", [
        [],
        ["--checkpoint", "a", "--report", "b"],
    ])
    def test_needs_exactly_one_source(self, extra, capsys):
        rc = main(["scheme"] + extra)
        assert rc == 1
        assert "exactly one" in capsys.readouterr().err


class TestHessianReportCommand:
    def test_table_and_speed_line(self, trained, tmp_path, capsys):
        out = tmp_path / "hess"
        rc = main(["hessian-report",
                   "--checkpoint", str(trained["out"] / "checkpoint.bin"),
                   "--config", trained["config"],
                   "--out-dir", str(out), "--no-figures", "--samples", "2"])
        assert rc == 0
        assert (out / "sensitivity.csv").is_file()
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "layer,trace,gap_sq,omega"
        assert lines[1].startswith("0,")
        assert lines[2].startswith("1,")
        assert lines[3].startswith("omega_mean,")
        assert re.fullmatch(r"prune_speeds,[12]\|[12]", lines[4])

    def test_figure_rendered_unless_suppressed(self, trained, tmp_path):
        out = tmp_path / "hess_fig"
        rc = main(["hessian-report",
                   "--checkpoint", str(trained["out"] / "checkpoint.bin"),
                   "--config", trained["config"],
                   "--out-dir", str(out), "--samples", "2"])
        assert rc == 0
        assert (out / "sensitivity.png").is_file()


class TestAccountingCommand:
    def test_reference_shapes_at_eight_bits(self, capsys):
        rc = main(["accounting", "--arch", "all", "--bits", "8"])
        assert rc == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines == [
            "model,params,split_params,params_millions,split_millions,ratio",
            "resnet20,269722,2157776,0.27,2.16,8.00",
            "resnet18,11689512,93516096,11.69,93.52,8.00",
            "resnet50,25557032,204456256,25.56,204.46,8.00",
        ]

    def test_single_arch(self, capsys):
        rc = main(["accounting", "--arch", "resnet20", "--bits", "4"])
        assert rc == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 2
        assert lines[1].startswith("resnet20,269722,1078888,")
        assert lines[1].endswith(",4.00")

    def test_custom_shape_table(self, tmp_path, capsys):
        p = tmp_path / "tiny.json"
        p.write_text(json.dumps({
            "name": "tiny", "groups": [["stem", 4], ["head", 3]],
            "total_params": 7,
        }))
        rc = main(["accounting", "--arch", str(p), "--bits", "1"])
        assert rc == 0
        assert capsys.readouterr().out.strip().splitlines()[1] == \
            "tiny,7,7,0.00,0.00,1.00"

    def test_custom_shape_sum_mismatch_is_a_data_error(self, tmp_path,
                                                       capsys):
        p = tmp_path / "off.json"
        p.write_text(json.dumps({
            "name": "off", "groups": [["stem", 4], ["head", 3]],
            "total_params": 9,
        }))
        rc = main(["accounting", "--arch", str(p)])
        assert rc == 2
        assert "groups sum to 7" in capsys.readouterr().err

    def test_unknown_arch(self, capsys):
        rc = main(["accounting", "--arch", "vgg16"])
        assert rc == 1
        err = capsys.readouterr().err
        assert "unknown architecture 'vgg16'" in err
        for name in REFERENCE_SHAPES:
            assert name in err

    def test_custom_shape_missing_key(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"name": "bad", "groups": []}))
        rc = main(["accounting", "--arch", str(p)])
        assert rc == 1
        assert "missing 'total_params'" in capsys.readouterr().err


class TestQuantizerTableCommand:
    def test_stdout_matches_the_file(self, tmp_path, capsys):
        dest = tmp_path / "table.csv"
        rc = main(["quantizer-table", "--bits", "3", "--slice", "1",
                   "--out", str(dest), "--points", "5"])
        assert rc == 0
        printed = capsys.readouterr().out
        assert printed.splitlines()[0] == \
            "u,full_code,coarse_code,lsb_code,residual"
        assert len(printed.splitlines()) == 6
        assert dest.read_text() == printed

    def test_figure_flag(self, tmp_path):
        fig = tmp_path / "map.png"
        rc = main(["quantizer-table", "--bits", "3", "--slice", "1",
                   "--out", str(tmp_path / "t.csv"), "--figure", str(fig)])
        assert rc == 0
        assert fig.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_bad_kind(self, tmp_path, capsys):
        rc = main(["quantizer-table", "--kind", "nearest",
                   "--out", str(tmp_path / "t.csv")])
        assert rc == 1
        assert "'nearest'" in capsys.readouterr().err

    def test_slice_must_fit_under_bits(self, tmp_path, capsys):
        rc = main(["quantizer-table", "--bits", "3", "--slice", "3",
                   "--out", str(tmp_path / "t.csv")])
        assert rc == 1
        assert "[1, bits)" in capsys.readouterr().err


class TestExitCodes:
    def test_config_error_exits_one(self, tmp_path, capsys):
        cfg = base_config(frobnicate=1)
        rc = main(["train", "--config", write_config(tmp_path, cfg),
                   "--out-dir", str(tmp_path / "out")])
        assert rc == 1
        err = capsys.readouterr().err
        assert err.startswith("config error:")
        assert "'frobnicate'" in err

    def test_missing_config_file_exits_one(self, tmp_path, capsys):
        rc = main(["train", "--config", str(tmp_path / "nope.json"),
                   "--out-dir", str(tmp_path / "out")])
        assert rc == 1
        assert "not found" in capsys.readouterr().err

    def test_data_error_exits_two(self, tmp_path, capsys):
        cfg = base_config()
        cfg["data"]["train"] = {
            "kind": "mnist-idx",
            "images": str(tmp_path / "absent-images.idx"),
            "labels": str(tmp_path / "absent-labels.idx"),
        }
        cfg["model"]["input_shape"] = [784]
        rc = main(["train", "--config", write_config(tmp_path, cfg),
                   "--out-dir", str(tmp_path / "out")])
        assert rc == 2
        assert capsys.readouterr().err.startswith("data error:")

    def test_divergence_exits_three(self, tmp_path, capsys):
        cfg = base_config()
        cfg["model"]["quantized"] = False
        cfg["train"]["lr"] = 1e308
        cfg["train"]["epochs"] = 3
        rc = main(["train", "--config", write_config(tmp_path, cfg),
                   "--out-dir", str(tmp_path / "out")])
        assert rc == 3
        assert capsys.readouterr().err.startswith("divergence:")
