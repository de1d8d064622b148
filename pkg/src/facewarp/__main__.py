import sys

from facewarp.cli import main

sys.exit(main())
