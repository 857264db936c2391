import sys

from ubl.cli import main

sys.exit(main())
