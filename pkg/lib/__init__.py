# swarmforge - process, port and hardware helpers
