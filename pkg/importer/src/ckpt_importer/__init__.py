"""Checkpoint importer: safetensors/npz to portable tensor archive."""

from .archive import ArchiveError, read_archive, write_archive
from .convert import import_checkpoint
from .select import LayerSelection, Rule, SelectionError, load_selection
from .sources import SourceError, load_checkpoint, read_npz, read_safetensors, \
    write_safetensors

__all__ = [
    "ArchiveError", "read_archive", "write_archive",
    "import_checkpoint",
    "LayerSelection", "Rule", "SelectionError", "load_selection",
    "SourceError", "load_checkpoint", "read_npz", "read_safetensors",
    "write_safetensors",
]
