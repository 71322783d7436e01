"""Top-level behaviour gates.  Each test runs one self-contained check with
its own tolerances and time budget and prints a single pass/fail line; the
assertion message carries the same line so failures are self-describing.

The two inference-scale checks run the full-size ciphertext ring and take
minutes; everything else finishes in seconds.
"""

import pytest

from hegemony.acceptance import (
    check_ckks_vs_simulator,
    check_depth_ledger,
    check_fault_injection,
    check_federated_average,
    check_kernel_oracles,
    check_oblivious_inference,
    check_paillier_laws,
    check_threshold_ceremony,
)


def _gate(result):
    print(result.line())
    assert result.passed, result.line()


def test_1_additive_cipher_laws():
    _gate(check_paillier_laws())


def test_2_threshold_ceremony_and_share_custody():
    _gate(check_threshold_ceremony())


def test_3_kernels_match_cleartext_oracles_bitwise():
    _gate(check_kernel_oracles())


@pytest.mark.slow
def test_4_encrypted_backend_matches_simulator():
    _gate(check_ckks_vs_simulator())


@pytest.mark.slow
def test_5_depth_ledger_and_cost_growth():
    _gate(check_depth_ledger())


@pytest.mark.slow
def test_6_end_to_end_encrypted_inference():
    _gate(check_oblivious_inference())


def test_7_federated_average_accuracy_and_server_blindness():
    _gate(check_federated_average())


def test_8_fault_injection_aborts():
    _gate(check_fault_injection())
