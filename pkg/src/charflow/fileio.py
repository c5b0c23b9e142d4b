"""Small file-output helpers shared by the CSV and JSON writers."""

from __future__ import annotations

import os
import tempfile


def atomic_write_text(path, text):
    """Write text to path through a same-directory temp file and rename.

    Readers never observe a half-written file, and a crash leaves the old
    content in place.
    """
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
