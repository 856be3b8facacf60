"""Allow running as: python -m camds"""

from camds.main import cli

cli()
