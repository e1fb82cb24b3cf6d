#!/usr/bin/env python3
"""
Test runner script for NeuroDodge
Wraps pytest with the test categories used in this repository
"""

import argparse
import subprocess
import sys
from pathlib import Path


class NeuroDodgeTestRunner:
    """Test runner for NeuroDodge; the service is exercised in-process, so nothing is started here"""

    def __init__(self):
        self.project_root = Path(__file__).parent.parent

    def run_tests(self, test_args):
        """Run tests with pytest"""
        cmd = [sys.executable, "-m", "pytest"] + test_args

        print(f"Running tests: {' '.join(cmd)}")
        result = subprocess.run(cmd, cwd=self.project_root)
        return result.returncode

    @staticmethod
    def _common(args, verbose=False, coverage=False):
        if verbose:
            args.extend(["-v", "--tb=short"])
        if coverage:
            args.extend(["--cov=neurododge", "--cov-report=term-missing", "--cov-report=html"])
        return args

    def run_unit_tests(self, verbose=False, coverage=False):
        """Run unit tests only"""
        return self.run_tests(self._common(["tests/unit/", "-m", "unit"], verbose, coverage))

    def run_integration_tests(self, verbose=False, coverage=False):
        """Run CLI, API and pipeline tests"""
        return self.run_tests(self._common(["tests/integration/", "-m", "integration"], verbose, coverage))

    def run_quick_tests(self, verbose=False):
        """Everything except slow and acceptance tests"""
        return self.run_tests(self._common(["tests/", "-m", "not slow and not acceptance"], verbose))

    def run_acceptance_tests(self, verbose=False):
        """Full-size experiment checks; these can take an hour or more"""
        return self.run_tests(self._common(["tests/", "-m", "acceptance", "--timeout=0"], verbose))

    def run_all_tests(self, verbose=False, coverage=False):
        """Run all tests except the acceptance checks"""
        return self.run_tests(self._common(["tests/"], verbose, coverage))

    def run_specific_test(self, test_path, verbose=False):
        """Run a specific test file or function; markers are not filtered"""
        return self.run_tests(self._common([test_path, "-m", ""], verbose))


def main():
    parser = argparse.ArgumentParser(description="NeuroDodge Test Runner")
    parser.add_argument("-v", "--verbose", action="store_true", help="Verbose output")
    parser.add_argument("-c", "--coverage", action="store_true", help="Generate coverage report")
    parser.add_argument("--unit", action="store_true", help="Run unit tests only")
    parser.add_argument("--integration", action="store_true", help="Run integration tests only")
    parser.add_argument("--quick", action="store_true", help="Skip slow and acceptance tests")
    parser.add_argument("--acceptance", action="store_true", help="Run the full-size acceptance checks")
    parser.add_argument("--test", help="Run specific test file or function")
    parser.add_argument("--list-tests", action="store_true", help="List available tests")

    args = parser.parse_args()

    runner = NeuroDodgeTestRunner()

    try:
        if args.list_tests:
            print("Available test categories:")
            print("  --unit          Unit tests")
            print("  --integration   CLI, API and pipeline tests")
            print("  --quick         Everything except slow and acceptance tests")
            print("  --acceptance    Full-size experiment checks (long)")
            print("  --test PATH     Run specific test file or function")
            print("\nExample usage:")
            print("  python scripts/run_tests.py --unit -v")
            print("  python scripts/run_tests.py --integration --coverage")
            print("  python scripts/run_tests.py --test tests/unit/test_sparse.py")
            return 0

        if args.test:
            return runner.run_specific_test(args.test, args.verbose)
        elif args.unit:
            return runner.run_unit_tests(args.verbose, args.coverage)
        elif args.integration:
            return runner.run_integration_tests(args.verbose, args.coverage)
        elif args.quick:
            return runner.run_quick_tests(args.verbose)
        elif args.acceptance:
            return runner.run_acceptance_tests(args.verbose)
        else:
            return runner.run_all_tests(args.verbose, args.coverage)

    except KeyboardInterrupt:
        print("\nTest execution interrupted by user")
        return 1


if __name__ == "__main__":
    sys.exit(main())
