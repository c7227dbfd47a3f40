import sys

from weldloop.expcli.cli import main

sys.exit(main())
