import numpy as np
import pytest

from ehrgan.schema import VITAL_COLUMNS, Cohort, RecordSchema

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")


def make_cohort(codes, icd=None, cpt=(), vitals=None, age=None, gender=None, constraints=None) -> Cohort:
    """Small cohort from a code matrix; vitals default to a valid constant record."""
    codes = np.asarray(codes, dtype=bool)
    n, m = codes.shape
    icd = list(icd) if icd is not None else [f"{100 + j}" for j in range(m - len(cpt))]
    schema = RecordSchema(icd, list(cpt)) if constraints is None else RecordSchema(icd, list(cpt), constraints)
    if vitals is None:
        vitals = np.tile([25.0, 27.0, 29.0, 118.0, 122.0, 126.0, 74.0, 77.0, 80.0], (n, 1))
    age = np.full(n, 40) if age is None else np.asarray(age)
    gender = np.zeros(n, dtype=np.int64) if gender is None else np.asarray(gender)
    return Cohort(schema, age, gender, codes, np.asarray(vitals, dtype=np.float64).reshape(n, len(VITAL_COLUMNS)))


def central_fd(f, x: np.ndarray, h: float = 1e-6, coords=None) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. the array ``x`` (modified in place)."""
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        out.reshape(-1)[i] = (up - down) / (2 * h)
    return out


def rel_err(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
