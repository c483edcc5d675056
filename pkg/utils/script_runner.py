"""Run the ``test_*`` functions of a test script without a test framework.

    if __name__ == "__main__":
        sys.exit(run_tests(globals()))

Long-running directional tests call ``require_slow_tests()`` first; they are
skipped unless ``MVSSL_SLOW_TESTS`` is set. pytest reports the same tests as
skipped, since it understands ``unittest.SkipTest``.
"""
import os
import sys
import time
import traceback
import unittest
from typing import Any, Dict

SLOW_TESTS_ENV = "MVSSL_SLOW_TESTS"


def require_slow_tests() -> None:
    """Skip the calling test unless MVSSL_SLOW_TESTS is 1/true/yes."""
    if os.getenv(SLOW_TESTS_ENV, "").strip().lower() not in ("1", "true", "yes"):
        raise unittest.SkipTest(f"set {SLOW_TESTS_ENV}=1 to run")


def run_tests(namespace: Dict[str, Any], verbose: bool = False) -> int:
    """
    Call every ``test_*`` function in ``namespace`` in definition order.

    Returns:
        0 when nothing failed, 1 otherwise (usable as the process exit code)
    """
    verbose = verbose or "-v" in sys.argv[1:]
    tests = [(name, fn) for name, fn in namespace.items() if name.startswith("test_") and callable(fn)]
    title = namespace.get("__file__", "tests")
    print("=" * 70)
    print(f"Running {len(tests)} tests from {title}")
    print("=" * 70)

    failures = skipped = 0
    for name, fn in tests:
        start = time.perf_counter()
        try:
            fn()
        except unittest.SkipTest as e:
            skipped += 1
            print(f"- {name}: skipped ({e})")
        except Exception as e:
            failures += 1
            print(f"✗ {name}: {type(e).__name__}: {e}")
            if verbose:
                traceback.print_exc()
        else:
            print(f"✓ {name} ({time.perf_counter() - start:.2f}s)")

    print()
    summary = f"{len(tests) - failures - skipped} passed, {failures} failed"
    print(summary + (f", {skipped} skipped" if skipped else ""))
    return 1 if failures else 0
