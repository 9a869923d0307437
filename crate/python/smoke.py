"""Smoke test for the serl_py extension.

Build and install first:
    cd crates/py && maturin build --release -o dist && pip install dist/serl_py-*.whl
then run `python python/smoke.py`.
"""

import json
import sys
import tempfile
from pathlib import Path

import serl_py


def small_config():
    cfg = serl_py.Config.from_text("n_per_class = 40\nsource_epochs = 6\nadapt_epochs = 2\nseeds = 1\n")
    assert cfg.classes == 5 and cfg.seeds == [1]
    assert serl_py.Config.from_text(cfg.to_text()) == cfg
    return cfg


def check_errors(cfg):
    for bad in ("lamda_mix = 1\n", "tau = -1\n"):
        try:
            serl_py.Config.from_text(bad)
        except serl_py.ConfigError:
            pass
        else:
            raise AssertionError(f"{bad!r} was accepted")
    try:
        cfg.with_value("no_such_key", "1")
    except serl_py.ConfigError:
        pass
    else:
        raise AssertionError("unknown key was accepted")
    assert cfg.with_value("lambda_mix", "2").get("lambda_mix") == "2"


def check_training(cfg):
    data = serl_py.generate(cfg)
    src, tgt = data["source"], data["target"]
    assert len(src["x"]) == len(src["y"]) == 200
    assert set(tgt["split"]) == {"labeled", "unlabeled", "test"}

    pre = serl_py.pretrain(cfg, seed=1)
    assert not pre.classifier_frozen
    adapted, acc = serl_py.adapt(cfg, pre, seed=1)
    assert adapted.classifier_frozen
    assert adapted.classifier_digest() == pre.classifier_digest()
    assert adapted.digest() != pre.digest()
    assert 0.0 <= acc <= 1.0
    assert abs(serl_py.evaluate(cfg, adapted, "test") - acc) < 1e-12

    probs = adapted.predict_proba(tgt["x"][:4])
    assert all(abs(sum(row) - 1.0) < 1e-9 for row in probs)
    assert adapted.predict(tgt["x"][:4]) == [max(range(5), key=row.__getitem__) for row in probs]
    return acc


def check_outputs(cfg):
    with tempfile.TemporaryDirectory() as d:
        summary = serl_py.run(cfg, d, seeds=[2], export_features=True)
        assert summary["seeds"] == [2]
        assert (Path(d) / "metrics" / "seed2.jsonl").is_file()
        assert (Path(d) / "features" / "seed2.csv").is_file()
        on_disk = json.loads((Path(d) / "summary.json").read_text())
        assert on_disk["test_acc"] == summary["test_acc"]
    rows = serl_py.ablate(cfg, terms="base;prob+mix+pre")
    assert [r["terms"] for r in rows] == ["base", "prob+mix+pre"]
    return rows


def main():
    cfg = small_config()
    check_errors(cfg)
    errors = serl_py.gradcheck(instances=20)
    assert all(e < serl_py.GRADCHECK_TOL for e in errors.values()), errors
    assert serl_py.gradcheck(corrupt=True)["spcr"] > serl_py.GRADCHECK_TOL
    acc = check_training(cfg)
    rows = check_outputs(cfg)
    print(f"gradcheck ok ({len(errors)} terms), adapted accuracy {acc:.3f}")
    for r in rows:
        print(f"  {r['terms']:<14} {100 * r['mean']:.1f}%")
    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
