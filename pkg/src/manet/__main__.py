import sys

from manet.cli import main

sys.exit(main())
