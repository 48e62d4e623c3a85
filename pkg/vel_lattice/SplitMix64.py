'''
SplitMix64, the pinned pseudo random generator behind every seeded choice
(peer sampling, fault draws, generated traces, anti-entropy rotation).
Identical seeds give identical draw sequences on every implementation.

@author: Alfredo Velasco
'''

from .Codec import MASK_64

GAMMA = 0x9E3779B97F4A7C15
MIX_1 = 0xBF58476D1CE4E5B9
MIX_2 = 0x94D049BB133111EB


class SplitMix64(object):

    """A SplitMix64 generator"""
    def __init__(self, seed=0):
        '''
        :param int seed: any integer, reduced to 64 bits
        '''
        super(SplitMix64, self).__init__()
        self.state = seed & MASK_64

    def next_u64(self):
        '''
        Returns the next 64-bit draw
        '''
        self.state = (self.state + GAMMA) & MASK_64
        z = self.state
        z = ((z ^ (z >> 30)) * MIX_1) & MASK_64
        z = ((z ^ (z >> 27)) * MIX_2) & MASK_64
        return z ^ (z >> 31)

    def below(self, n):
        '''
        Returns a draw in [0, n)

        :raises ValueError: if n is not positive
        '''
        if n <= 0:
            raise ValueError(f"{n=} must be positive!")
        return self.next_u64() % n

    def next_float(self):
        '''
        Returns a draw in [0, 1) with 53 bits of precision
        '''
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def chance(self, p):
        '''
        Returns True with probability p
        '''
        return self.next_float() < p
