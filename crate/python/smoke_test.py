"""Smoke test for the longmem Python extension.

Build and run from the repository root:

    cargo build -p longmem-py --release --features extension-module
    cp target/release/liblongmem_py.so python/longmem_py.so
    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import longmem_py as lm


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol


def main():
    q = lm.block_rotation([1], 4)
    assert close(q[0][0], 0.0) and close(q[0][1], 1.0) and close(q[1][0], -1.0)

    o = lm.nearest_orthogonal([[2.0, 0.0], [0.0, 0.5]])
    assert close(o[0][0], 1.0) and close(o[1][1], 1.0)
    assert close(lm.spectral_norm([[3.0, 0.0], [0.0, 1.0]]), 3.0, 1e-3)
    assert lm.gemm([[1.0, 2.0]], [[3.0], [4.0]]) == [[11.0]]

    v = lm.sample_unit_sphere(16, 3, seed=7)
    assert all(close(math.sqrt(sum(x * x for x in row)), 1.0, 1e-12) for row in v)

    copy = lm.gen_copy(4, 3, 10, seed=1)
    assert len(copy["inputs"]) == 16 and copy["delimiter_index"] == 12
    assert close(lm.copy_baseline(8, 10, 100), 10 * math.log(8) / 120)
    assert close(lm.adding_baseline(), 1 / 6)

    add = lm.gen_adding(50, seed=2)
    y = lm.adding_mechanism(add["values"], [float(m) for m in add["markers"]])
    assert close(y, add["target"]), (y, add["target"])

    rows = lm.success_sweep(32, 50, [2, 4], [1, 2], 20, seed=3)
    assert len(rows) == 4 and all(0.0 <= r[4] <= 1.0 for r in rows)
    mean, se = lm.interference_stat(64, 5, 100, 2000, seed=4)
    assert abs(mean - 4 / 128) < 4 * se, (mean, se)

    err, ok = lm.grad_check("lt-rnn", task="adding")
    assert ok, err

    model = lm.Model("pooled", 2, 8, 1, nonlinearity="relu", seed=5)
    assert model.architecture == "pooled-lt-rnn" and model.hidden == 8
    outputs = model.forward([[0.5, 1.0], [0.2, 0.0], [0.9, 1.0]])
    assert len(outputs) == 3 and len(outputs[0]) == 1
    loss = model.sequence_loss(add["line"])
    assert math.isfinite(loss)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.ckpt")
        model.save(path)
        again = lm.Model.load(path)
        assert again.tensors() == model.tensors()

    csv, trained = lm.train(
        'task = "adding"\nmodel = "lt-irnn"\nT = 20\nhidden = 16\n'
        "max_updates = 20\neval_every = 10\neval_size = 50\n"
    )
    data = [line for line in csv.splitlines() if not line.startswith("#")]
    assert data[0].startswith("update,train_loss,eval_loss") and len(data) == 4
    assert trained.num_parameters() == 16 * 2 + 16 * 16 + 16 + 16

    print("python smoke test passed")


if __name__ == "__main__":
    main()
