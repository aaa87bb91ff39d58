import os

import torch

# Honor the same thread override the CLI uses; a fixed thread count keeps
# CPU float reductions (and thus loss curves) bitwise reproducible.
_threads = os.environ.get("SPANLM_THREADS")
if _threads:
    torch.set_num_threads(int(_threads))

# Filled by tests/test_acceptance.py; echoed after the run so the per-criterion
# verdict lines survive pytest's output capture.
ACCEPTANCE_RESULTS: list[tuple[str, str, str]] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_RESULTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for cid, status, detail in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(f"criterion {cid}: {status} — {detail}")
