import sys

from firerisk.cli import main

sys.exit(main())
