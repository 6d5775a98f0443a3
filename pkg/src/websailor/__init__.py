"""websailor: server-centric dynamic parallel crawler with a synthetic-web
test harness."""

__version__ = "0.1.0"
