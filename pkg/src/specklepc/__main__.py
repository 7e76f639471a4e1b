import sys

from specklepc.cli import main

sys.exit(main())
