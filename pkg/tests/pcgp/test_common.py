import io
import unittest
from contextlib import redirect_stderr, redirect_stdout

from pcgp import common as rc


class CommonTests(unittest.TestCase):
    def setUp(self):
        self._orig_verbose = rc.VERBOSE
        self.addCleanup(setattr, rc, "VERBOSE", self._orig_verbose)

    def test_colours(self):
        self.assertTrue(rc.Colours.red.startswith("\033["))

    def test_debug_is_silent_unless_verbose(self):
        rc.VERBOSE = False
        out = io.StringIO()
        with redirect_stdout(out):
            rc.debug("hidden")
        self.assertEqual(out.getvalue(), "")
        rc.VERBOSE = True
        with redirect_stdout(out):
            rc.debug("shown")
        self.assertIn("[DEBUG]", out.getvalue())
        self.assertIn("shown", out.getvalue())

    def test_die_exits_with_code_one_on_stderr(self):
        err = io.StringIO()
        with redirect_stderr(err), self.assertRaises(SystemExit) as ctx:
            rc.die("boom")
        self.assertEqual(ctx.exception.code, 1)
        self.assertIn("boom", err.getvalue())

    def test_error_hierarchy(self):
        self.assertTrue(issubclass(rc.InputError, ValueError))
        self.assertTrue(issubclass(rc.NumericalError, rc.PcgpError))
        self.assertTrue(issubclass(rc.UsageError, rc.PcgpError))

    def test_format_error_reports_offset_and_path(self):
        exc = rc.FormatError("bad magic", 0, "data.bin")
        self.assertEqual(exc.offset, 0)
        self.assertIn("data.bin", str(exc))
        self.assertIn("byte offset 0", str(exc))

    def test_numerical_error_carries_jitter(self):
        exc = rc.NumericalError("failed", jitter=1e-2, tensor="loss")
        self.assertEqual(exc.jitter, 1e-2)
        self.assertEqual(exc.tensor, "loss")


if __name__ == "__main__":
    unittest.main()
