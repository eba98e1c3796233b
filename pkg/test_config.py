#!/usr/bin/env python3
"""
Configuration, worker pool and helper tests
"""

import os
import re
import sys
import threading
import time
from pathlib import Path

import numpy as np
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

sys.path.insert(0, str(Path(__file__).parent))

from config import Config
from parallel import resolve_workers, run_ordered
from utils import create_error_message, dump_json, parse_range, total_variation


def with_env(values, fn):
    saved = {k: os.environ.get(k) for k in values}
    os.environ.update(values)
    try:
        Config.reload()
        return fn()
    finally:
        for k, v in saved.items():
            if v is None:
                os.environ.pop(k, None)
            else:
                os.environ[k] = v
        Config.reload()


def test_validate_config_structure():
    validation = Config.validate_config()
    assert set(validation) == {"valid", "issues", "config"}
    assert set(validation["config"]) == {
        "threads", "log_level", "enumeration_threshold", "enumeration_cap", "burn_in", "thin", "seed",
    }
    assert validation["config"]["enumeration_cap"] == 22


def test_environment_overrides():
    def check():
        assert Config.THREADS == 3
        assert Config.DEFAULT_SEED == 77
        assert Config.validate_config()["valid"]

    with_env({"JUNGLE_THREADS": "3", "JUNGLE_SEED": "77"}, check)


def test_bad_environment_reported():
    def check():
        issues = Config.validate_config()["issues"]
        assert any("JUNGLE_ENUMERATION_THRESHOLD" in i for i in issues)
        assert any("JUNGLE_LOG_LEVEL" in i for i in issues)

    with_env({"JUNGLE_ENUMERATION_THRESHOLD": "30", "JUNGLE_LOG_LEVEL": "LOUD"}, check)


def test_unparseable_integer_falls_back_to_default():
    def check():
        assert Config.DEFAULT_BURN_IN == 1000

    with_env({"JUNGLE_BURN_IN": "lots"}, check)


def test_run_ordered_preserves_order():
    def slow_square(x):
        time.sleep(0.001 * (10 - x))
        return x * x

    expected = [x * x for x in range(10)]
    assert run_ordered(slow_square, range(10), max_workers=1) == expected
    assert run_ordered(slow_square, range(10), max_workers=4) == expected
    assert run_ordered(slow_square, [], max_workers=4) == []


def test_run_ordered_uses_named_threads():
    names = run_ordered(lambda _: threading.current_thread().name, range(4), max_workers=2,
                        thread_name_prefix="scan")
    assert all(name.startswith("scan") for name in names) or Config.THREADS == 1


def test_resolve_workers_is_capped():
    assert resolve_workers(1) == 1
    assert resolve_workers(10 ** 6) == max(1, Config.THREADS)
    assert resolve_workers(0) == 1


def test_parse_range():
    assert parse_range("-6:2:64") == (-6.0, 2.0, 64)
    for bad in ("1:2", "2:1:10", "0:1:1", "a:b:c"):
        try:
            parse_range(bad)
        except ValueError:
            continue
        raise AssertionError(f"'{bad}' should be rejected")


def test_error_message_format():
    message = create_error_message(ValueError("p out of range"), "invalid input")
    assert re.match(r"^\[\d{4}-\d{2}-\d{2} \d{2}:\d{2}:\d{2}\] Error \(invalid input\): p out of range$", message)
    assert create_error_message(ValueError("x")).endswith("Error: x")


def test_json_rendering_of_numpy_values():
    text = dump_json({"a": np.float64(0.1), "b": np.arange(3), "c": float("inf"), (0, 1): True})
    assert '"a": 0.1' in text and '"c": null' in text and '"(0, 1)": true' in text


def test_total_variation_pads_shorter_vector():
    assert total_variation([0.5, 0.5], [0.5, 0.5, 0.0]) == 0.0
    assert abs(total_variation([1.0], [0.0, 1.0]) - 1.0) < 1e-15


def main():
    """Run all tests"""
    print("⚙️ Configuration tests")
    print("=" * 40)
    tests = [(name, fn) for name, fn in globals().items() if name.startswith("test_") and callable(fn)]
    failed = 0
    for name, fn in tests:
        try:
            fn()
            print(f"✅ {name}")
        except Exception as e:
            failed += 1
            print(f"❌ {name}: {e}")
    print(f"\n{len(tests) - failed}/{len(tests)} passed")
    return failed == 0


if __name__ == "__main__":
    sys.exit(0 if main() else 1)
