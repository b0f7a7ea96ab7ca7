"""
File helpers shared by every writer in the pipeline
"""

import os
import tempfile


def atomic_write(path: str, payload: bytes):
    """Write to a temp file in the target directory, then rename over path"""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix='.tmp-', suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def atomic_write_text(path: str, text: str):
    atomic_write(path, text.encode('utf-8'))
