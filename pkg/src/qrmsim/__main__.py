import sys

from qrmsim.cli import main

sys.exit(main())
