"""Smoke test for the abreu_lab extension.

Build and install first:
    cd crates/py && maturin build --release -o /tmp/wheels
    pip install /tmp/wheels/abreu_lab-*.whl
"""

import json
import math
import pathlib
import sys
import tempfile

import abreu_lab as al


def check(cond, what):
    print(("ok   " if cond else "FAIL ") + what)
    return bool(cond)


def main():
    results = []

    interval = al.Polytope.interval(0.0, 1.0)
    square = al.Polytope.box([0.0, 0.0], [1.0, 1.0])
    results.append(check(square.dim == 2 and len(square.rows) == 4, "box polytope has 4 facets"))
    results.append(check(abs(square.guillemin_det_product([0.3, 0.7]) - 1.0) < 1e-12, "det(v_ij) * prod l_k = 1 on the square"))

    defect = al.affine_defect(interval, 2.0, h=1.0 / 256)
    results.append(check(max(abs(x) for x in defect) < 1e-9, f"interval A=2 is balanced {defect}"))

    u, report = al.solve(interval, 2.0, h=1.0 / 256, p_o=[0.5])
    err = 0.0
    for (x,), val in zip(*u.nodes()):
        if 0.05 <= x <= 0.95:
            v = x * math.log(x) + (1 - x) * math.log(1 - x) + math.log(2)
            err = max(err, abs(val - v))
    results.append(check(report["converged"] and err < 1e-4, f"interval solve matches Guillemin (sup err {err:.1e})"))
    results.append(check(abs(al.l_functional(u, 2.0) - report["l_functional"]) < 1e-9, "l_functional matches report"))

    st = al.stability_lambda(interval, 2.0, seed=7, p_o=[0.5], samples=1000)
    results.append(check(abs(st["lambda_hat"] - 0.5) < 0.02, f"stability lambda_hat {st['lambda_hat']:.4f}"))

    try:
        al.stability_lambda(interval, 6.0, seed=7, p_o=[0.5])
        refused = False
    except al.RefusalError:
        refused = True
    results.append(check(refused, "unbalanced A refused with RefusalError"))

    g = al.Potential.guillemin(square, 1.0 / 32)
    dc = al.duality_check(g, margin=0.1)
    results.append(check(dc["young"] < 5.0 / 32, f"Legendre duality on the square (young {dc['young']:.1e})"))
    res = al.abreu_residual(g, 4.0, form="primal")
    results.append(check(res < 1e-6, f"Guillemin solves the square with A=4 (residual {res:.1e})"))

    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        path = tmp / "phi.bin"
        u.save(str(path))
        back = al.Potential.load(str(path), interval, p_o=[0.5])
        results.append(check(back.phi() == u.phi(), "phi dump round trip"))

        cfg = tmp / "cfg.json"
        cfg.write_text(json.dumps({
            "schema": "abreu-lab/v1",
            "polytope": {"kind": "box", "lo": [0, 0], "hi": [1, 1]},
            "a": 0.0,
            "h": 1.0 / 32,
            "output": str(tmp / "out"),
        }))
        code, msg = al.run_cli("solve", str(cfg))
        results.append(check(code == 2, f"CLI refuses A=0 on the square (exit {code})"))
        code, msg = al.run_cli("solve", str(cfg), {"a": 4.0})
        results.append(check(code == 0, f"CLI solves with override a=4 (exit {code})"))

    print(f"{sum(results)}/{len(results)} checks passed")
    return 0 if all(results) else 1


if __name__ == "__main__":
    sys.exit(main())
