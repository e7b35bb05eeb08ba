"""Smoke test for the pyikt extension module.

Build and install first:
    pip install --no-build-isolation -e crates/python
"""

import os
import tempfile

import pyikt

MODEL = {"d_model": 16, "ffn_hidden": 16, "num_heads": 2, "v_cap": 64, "max_seq_len": 8}
TRAIN = {"epochs": 2, "batch_size": 16}


def main():
    data = pyikt.generate_synthetic(
        {"num_schools": 2, "users_per_school": 20, "problems_per_school": 5, "responses_per_user": 20}
    )
    assert sorted(data) == ["syn1", "syn2"], data
    ds = data["syn1"]
    assert ds.stats()["num_learners"] == 20
    assert pyikt.TaskDataset.from_json(ds.to_json()).to_json() == ds.to_json()

    assert pyikt.auroc([0.1, 0.9, 0.4], [0, 1, 1]) == 1.0
    assert pyikt.auroc([0.3, 0.6], [1, 1]) is None

    ckpt, history = pyikt.train_task(ds, model=MODEL, train=TRAIN)
    assert ckpt.global_step == len(history["steps"]) > 0
    _, test_users = pyikt.split_users(ds)
    report = ckpt.evaluate(ds, test_users)
    assert 0.0 <= report["acc"] <= 1.0

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "m.ckpt")
        ckpt.save(path)
        again = pyikt.Checkpoint.load(path)
        assert again.digest() == ckpt.digest()
        assert again.evaluate(ds, test_users) == report

    protocol = {"model": MODEL, "train": TRAIN}
    result = pyikt.run_scenario(["syn1", "syn2"], data, protocol)
    assert len(result["reports"]) == 3
    assert result["reports"][0]["report"] == report

    drift = pyikt.drift_analysis(list(data.values()), {"perplexity": 5.0, "iterations": 260})
    assert len(drift["points"]) == 40 and len(drift["mixing"]) == 1

    try:
        pyikt.run_scenario(["nope"], data, protocol)
    except ValueError:
        pass
    else:
        raise AssertionError("missing task should raise")

    print("pyikt smoke test passed")


if __name__ == "__main__":
    main()
