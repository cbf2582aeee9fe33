"""Outcomes of the acceptance criteria, collected for the end-of-run summary."""

RESULTS: dict[str, tuple[bool, str]] = {}


def record(key: str, passed: bool, detail: str) -> bool:
    RESULTS[key] = (bool(passed), detail)
    print(f"{key} {'PASS' if passed else 'FAIL'}  {detail}")
    return bool(passed)
