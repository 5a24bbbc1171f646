import sys

from planttrack.cli import main

sys.exit(main())
