import sys

from rsnet.cli import main

sys.exit(main())
