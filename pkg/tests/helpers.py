from pmol.adapter import ExpertGroupTable, init_pmol_layer, stack_experts
from pmol.numcore import Rng, relative_error


def random_layer(K, r, a=12, b=10, seed=0, nonzero_b=True, group_size=1):
    """Layer with random (non-zero) B so the adapter actually contributes."""
    rng = Rng(seed)
    groups = ExpertGroupTable.even(K // group_size, group_size)
    layer = init_pmol_layer(a, b, r, groups, rng)
    if nonzero_b:
        for e in layer.experts:
            e.B.assign(rng.normal(e.B.shape, std=0.5))
        layer.router.W.assign(rng.normal(layer.router.W.shape, std=0.5))
        layer.router.bias.assign(rng.normal(layer.router.bias.shape, std=0.5))
    stack_experts(layer)
    return layer


def assert_grad_close(analytic, numeric, tol=1e-5):
    err = relative_error(analytic, numeric)
    assert err < tol, f"relative error {err:.3e} >= {tol}"
    return err



# acceptance outcomes, printed by the terminal-summary hook in conftest
ACCEPTANCE: dict[int, str] = {}


def report(number: int, title: str, ok: bool, detail: str) -> bool:
    ACCEPTANCE[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}  ({detail})"
    print(ACCEPTANCE[number])
    return ok
