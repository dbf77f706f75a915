import pytest

import offrl


def test_return_to_go():
    assert offrl.return_to_go([1.0, 2.0, 3.0], 0.5) == pytest.approx([2.75, 3.5, 3.0])
    assert offrl.return_to_go([1.0, 2.0, 3.0], 0.5, timeout=True) == pytest.approx([2.75, 3.5, 3.0])
    with pytest.raises(offrl.ConfigError):
        offrl.return_to_go([], 0.9)


def test_table1_matches_expected():
    for mode in ("every", "first"):
        assert offrl.table1(mode) == offrl.table1_expected(mode)
    assert len(offrl.table1_columns()) == 8
    with pytest.raises(offrl.ConfigError):
        offrl.table1("sometimes")


def test_normalized_score():
    assert offrl.normalized_score(5.0, 0.0, 10.0) == pytest.approx(0.5)


def test_fqi_iterations_shrink_with_better_init():
    ks = offrl.fqi_iterations(10, 4, 0, [0.0, 0.5, 1.0])
    assert ks[0] >= ks[1] >= ks[2] == 0


def test_git_blob_sha1():
    assert offrl.git_blob_sha1("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"


def test_run_experiment_small(tmp_path):
    cfg = {
        "name": "smoke",
        "dataset": {"episodes": 5},
        "agent": {"algorithm": "TD3BC", "hidden_dims": [8]},
        "pretrain": {"pretrain_steps": 20, "plateau_window": 10},
        "total_steps": 40,
        "eval_every": 20,
        "eval_episodes": 2,
        "anchor_episodes": 5,
        "seeds": [0, 1],
        "output_dir": str(tmp_path),
    }
    manifest = offrl.run_experiment(cfg)
    assert len(manifest["seeds"]) == 2
    assert (tmp_path / "smoke_manifest.json").exists()
    with pytest.raises(offrl.ConfigError):
        offrl.run_experiment({"total_steps": 10, "eval_every": 3})
