import os
import json
import hashlib
import logging
import tempfile

from errors import DataLoadError

logger = logging.getLogger(__name__)


def ensure_directory(directory_path):
    """
    Ensure a directory exists with proper error handling

    Args:
        directory_path: Path to ensure exists

    Returns:
        The directory path
    """
    if not directory_path:
        return directory_path
    try:
        os.makedirs(directory_path, exist_ok=True)
        return directory_path
    except OSError as e:
        error_msg = f"Error creating directory {directory_path}: {str(e)}"
        logger.error(error_msg)
        raise DataLoadError(error_msg) from e


def open_input(file_path, mode='r'):
    """
    Open an input file, turning OS errors into load errors naming the path

    Args:
        file_path: Path of file to open
        mode: Open mode ('r' or 'rb')

    Returns:
        The opened file object
    """
    encoding = None if 'b' in mode else 'utf-8'
    try:
        return open(file_path, mode, encoding=encoding)
    except FileNotFoundError:
        raise DataLoadError(f"File not found: {file_path}") from None
    except PermissionError:
        raise DataLoadError(f"Permission denied when opening file: {file_path}") from None
    except OSError as e:
        raise DataLoadError(f"IO error opening file {file_path}: {str(e)}") from e


def load_json(file_path):
    """Read a JSON document, naming the file on decode errors"""
    with open_input(file_path) as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise DataLoadError(f"{file_path}:{e.lineno}: invalid JSON ({e.msg})") from None


def atomic_write(file_path, write, binary=False):
    """Call write(f) on a temp file in the destination directory, then rename it into place"""
    directory = os.path.dirname(os.path.abspath(file_path))
    ensure_directory(directory)
    fd, temp_path = tempfile.mkstemp(dir=directory, prefix=os.path.basename(file_path) + '.')
    try:
        if binary:
            f = os.fdopen(fd, 'wb')
        else:
            f = os.fdopen(fd, 'w', encoding='utf-8')
        with f:
            write(f)
        os.replace(temp_path, file_path)
    except Exception:
        if os.path.exists(temp_path):
            os.unlink(temp_path)
        raise
    return file_path


def save_json(data, file_path):
    """Write JSON atomically (temp file in the same directory, then rename)"""
    def write(f):
        json.dump(data, f, indent=2, sort_keys=True)
        f.write('\n')
    return atomic_write(file_path, write)


def append_jsonl(record, file_path):
    """Append one structured record as a single JSON line"""
    ensure_directory(os.path.dirname(os.path.abspath(file_path)))
    with open(file_path, 'a', encoding='utf-8') as f:
        f.write(json.dumps(record, sort_keys=True) + '\n')


def write_tsv(rows, header, file_path):
    """
    Write plot-ready tab separated values

    Args:
        rows: Iterable of sequences, one per line
        header: Column names
        file_path: Destination path

    Returns:
        The destination path
    """
    ensure_directory(os.path.dirname(os.path.abspath(file_path)))
    with open(file_path, 'w', encoding='utf-8') as f:
        f.write('\t'.join(header) + '\n')
        for row in rows:
            f.write('\t'.join(_format_cell(v) for v in row) + '\n')
    return file_path


def _format_cell(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def vocab_hash(vocab):
    """Stable fingerprint of an ordered vocabulary"""
    digest = hashlib.sha256('\n'.join(vocab).encode('utf-8')).hexdigest()
    return digest[:16]
