"""Time-consistent dynamic scene reconstruction: a frozen canonical radiance field plus per-timestamp
backward deformation fields, tracked frame by frame."""

__version__ = "0.1.0"
