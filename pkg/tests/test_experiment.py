import json
from dataclasses import replace

import pytest

from cvst import experiment
from cvst.errors import ConfigError
from cvst.experiment import (ChannelSettings, ClipSettings, ExperimentConfig, MetricRow, config_from_dict,
                             load_config, rows_to_csv, run, summarize, sweep_config)
from cvst.pipeline import LAMBDA_SET, SNR_SET_DB, CvstModel


@pytest.fixture(scope="module")
def model():
    return CvstModel()


def test_grid_row_count(model):
    cfg = sweep_config(ExperimentConfig(seeds=tuple(range(5))), "snr")
    rows, summary = run(cfg, model)
    assert len(rows) == 8 * 5 * 12 == summary["rows"]
    assert len(summary["points"]) == 8
    assert all(0 < r.psnr_db <= 99 and r.cbr > 0 for r in rows)
    assert sweep_config(cfg, "lambda").lambdas == LAMBDA_SET
    with pytest.raises(ConfigError):
        sweep_config(cfg, "seed")


def test_csv_is_byte_identical(model, tmp_path):
    cfg = ExperimentConfig(clip=ClipSettings(frames=3), seeds=(0, 1, 2), snrs_db=(0.0, 10.0), lambdas=(0.06, 0.2),
                           out_csv=str(tmp_path / "a" / "rows.csv"), out_json=str(tmp_path / "a" / "sum.json"))
    run(cfg, model)
    first = (tmp_path / "a" / "rows.csv").read_bytes()
    rows, _ = run(replace(cfg, workers=3, out_csv=str(tmp_path / "b.csv"), out_json=None), model)
    assert (tmp_path / "b.csv").read_bytes() == first
    assert first.decode().splitlines()[0] == ",".join(MetricRow.HEADER)
    assert first.count(b"\n") == 1 + 3 * 2 * 2 * 3
    summary = json.loads((tmp_path / "a" / "sum.json").read_text())
    assert summary["rows"] == len(rows) and summary["config"]["seeds"] == [0, 1, 2]


def test_rows_sorted_and_csv_format():
    rows = [MetricRow(1, 0, 2.0, 0.12, 20.123456789012, 0.05, 1, 2, 3, 4),
            MetricRow(0, 1, 0.0, 0.12, 30.0, 0.1, 1, 1, 1, 1)]
    text = rows_to_csv(rows).splitlines()
    assert text[1].startswith("0,1,0,0.12,30,")
    assert "20.1234568" in text[2]


def test_summary_means_over_seeds():
    rows = [MetricRow(s, t, 0.0, 0.12, 10.0 + s, 0.1, 1, 1, 1, 1) for s in (0, 1) for t in range(3)]
    pt = summarize(rows)["points"][0]
    assert pt["psnr_mean"] == pytest.approx(10.5) and pt["psnr_std"] == pytest.approx(0.5) and pt["seeds"] == 2


def test_config_parsing_and_paths(tmp_path):
    cfg = config_from_dict({"clip": {"frames": 4, "speed": [1, 0]}, "snrs_db": [0, 14], "seeds": [3]})
    assert cfg.clip.frames == 4 and cfg.clip.speed == (1, 0) and cfg.snrs_db == (0.0, 14.0)
    cases = [
        ({"clip": {"fps": 3}}, "clip.fps"),
        ({"snrs_db": 3}, "snrs_db"),
        ({"clip": {"frames": "x"}}, "clip.frames"),
        ({"channel": []}, "channel"),
        ({"lambdas": [0.1], "workers": 1.5}, "workers"),
        ({"bogus": 1}, "bogus"),
    ]
    for data, path in cases:
        with pytest.raises(ConfigError) as err:
            config_from_dict(data)
        assert err.value.path == path
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


@pytest.mark.parametrize("cfg,path", [
    (ExperimentConfig(snrs_db=()), "snrs_db"),
    (ExperimentConfig(lambdas=(-1.0,)), "lambdas[0]"),
    (ExperimentConfig(seeds=(-1,)), "seeds[0]"),
    (ExperimentConfig(clip=ClipSettings(height=30)), "clip.height"),
    (ExperimentConfig(clip=ClipSettings(height=64)), "clip.height"),
    (ExperimentConfig(clip=ClipSettings(frames=1)), "clip.frames"),
    (ExperimentConfig(channel=ChannelSettings(csi="blind")), "channel.csi"),
    (ExperimentConfig(channel=ChannelSettings(n_tx=4, n_rx=4)), "channel.n_tx"),
    (ExperimentConfig(channel=ChannelSettings(n_rx=1)), "channel.n_rx"),
    (ExperimentConfig(channel=ChannelSettings(csi="ls", pilot_length=1)), "channel.pilot_length"),
    (ExperimentConfig(workers=0), "workers"),
])
def test_validation_names_the_field(cfg, path):
    with pytest.raises(ConfigError) as err:
        cfg.validate()
    assert err.value.path == path


def test_missing_checkpoint_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        experiment.obtain_model(ExperimentConfig(checkpoint=str(tmp_path / "none.ckpt")))


def test_snr_trend_on_default_config(trained):
    model, _ = trained
    cfg = ExperimentConfig(seeds=tuple(range(20)), snrs_db=(0.0, 14.0))
    _, summary = run(cfg, model)
    low, high = summary["points"]
    assert high["psnr_mean"] > low["psnr_mean"]
    assert SNR_SET_DB[0] == low["snr_db"]
