# Level-1 fusion mixers
