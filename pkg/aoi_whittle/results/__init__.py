from .writer import ResultWriter, write_csv

__all__ = ["ResultWriter", "write_csv"]
