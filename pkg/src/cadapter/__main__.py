import sys

from cadapter.cli import main

sys.exit(main())
