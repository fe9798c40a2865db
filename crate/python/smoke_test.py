"""Smoke test for the pycalibreg extension module."""

import json
import math

import pycalibreg as cr


def main():
    data = cr.Dataset.blobs(k=3, n=600, d=4, spread=0.8, seed=1)
    assert len(data) == 600 and data.num_classes == 3
    train, val, test = data.split(0.8, 0.1, seed=2)
    assert len(train) + len(val) + len(test) == 600

    post = data.true_posterior(data.inputs[0])
    assert abs(sum(post) - 1.0) < 1e-12

    config = {
        "epochs": 5,
        "batch_size": 32,
        "lr": 0.05,
        "seed": 3,
        "architecture": {"hidden": [16, 16]},
        "regularizer": {"kind": "sw1", "coefficient": 0.1, "n_projections": 16},
    }
    net, history = cr.train(json.dumps(config), train, val, test)
    records = json.loads(history)["records"]
    assert len(records) == 5
    assert net.input_dim == 4 and net.num_classes == 3

    logits = net.logits(test.inputs)
    probs = net.predict_proba(test.inputs)
    assert all(abs(sum(p) - 1.0) < 1e-9 for p in probs)
    acc = cr.accuracy(logits, test.labels)
    ece = cr.ece(logits, test.labels, bins=15)
    nll = cr.nll(logits, test.labels)
    assert 0.0 <= ece <= 1.0 and nll > 0.0 and acc > 0.4

    tau = cr.fit_temperature(net.logits(val.inputs), val.labels)
    scaled = cr.apply_temperature(logits, tau)
    assert cr.accuracy(scaled, test.labels) == acc

    zeros = [[0.0] * 3 for _ in range(64)]
    per0 = cr.penalty("per", zeros, n_projections=64, seed=0)
    assert abs(per0 - math.sqrt(2.0 / math.pi)) < 1e-6
    assert cr.penalty("l2_norm_squared", [[1.0, 2.0]], seed=0) == 5.0
    assert cr.ll_upper_bound([0.5, 0.5], [0.5, 0.5]) >= 2 * 0.5 * math.log(0.5) - 1e-12

    report = json.loads(cr.calibrate(net, test, split_half=True, seed=4))
    assert report["mode"] == "split_half" and len(report["directions"]) == 2

    again = cr.Network.from_json(net.to_json())
    assert again.logits(test.inputs[:5]) == logits[:5]
    assert cr.Dataset.from_csv(data.to_csv()).labels == data.labels

    try:
        cr.penalty("nope", zeros)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown penalty kind accepted")

    print(f"ok: acc {acc:.3f} ece {ece:.3f} nll {nll:.3f} tau {tau:.3f}")


if __name__ == "__main__":
    main()
